//! Named parameter collections and their on-disk container.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic   b"RULPARAM"
//! version u32 (= 1)
//! count   u64
//! repeated `count` times:
//!   name_len u32, name (UTF-8)
//!   ndim u32, dims u64 × ndim
//!   values f64 × product(dims)
//! ```
//!
//! The plain-text manifest lists one `name<TAB>shape` line per parameter,
//! with the shape written as `d0xd1x…`.

use std::collections::BTreeMap;
use std::path::Path;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 8] = b"RULPARAM";
const VERSION: u32 = 1;

/// Named tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    tensors: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; names must be unique and values finite.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::NonFinite("Parameters::insert"));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::Precondition(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Zero-valued copy with identical names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            tape,
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Same names, same shapes.
    pub fn same_layout(&self, other: &Parameters) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.push_str(&format!("{name}\t{}\n", dims.join("x")));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.numel() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.error("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(&format!("unsupported version {version}")));
        }
        let count = r.u64()?;
        let mut params = Parameters::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error("parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes"));
        }
        Ok(params)
    }

    /// Writes `path` (binary container) and `path` + `.manifest`.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))?;
        let manifest = manifest_path(path);
        std::fs::write(&manifest, self.manifest()).map_err(io_err(&manifest))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    s.into()
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn error(&self, msg: &str) -> Error {
        Error::Format {
            path: "<bytes>".into(),
            msg: format!("{msg} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.error("unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parameters recorded on one tape.
pub struct BoundParams<'t> {
    tape: &'t Tape,
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Missing(format!("parameter `{name}`")))
    }

    /// Gradient for every bound parameter (zeros where unreachable).
    pub fn gradients(&self, grads: &Gradients) -> Parameters {
        Parameters {
            tensors: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), grads.wrt(*v)))
                .collect(),
        }
    }
}
