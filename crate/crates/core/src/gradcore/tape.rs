//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! Every primitive records one entry on the [`Tape`]; entries are appended in
//! execution order so the tape is topologically sorted by construction.
//! [`Tape::backward`] walks it once in reverse.

use std::cell::{Cell, Ref, RefCell};
use std::ops::Range;

use rand::Rng;

use super::special::{digamma, lgamma};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Negative-side slope of [`Elementwise::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

/// Pointwise functions available on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    Lgamma,
    Neg,
}

impl Elementwise {
    fn name(self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::LeakyRelu => "leaky_relu",
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::Softplus => "softplus",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Lgamma => "lgamma",
            Self::Neg => "neg",
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Self::Sigmoid => sigmoid(x),
            Self::Tanh => x.tanh(),
            Self::Softplus => softplus(x),
            Self::Exp => x.exp(),
            Self::Log => x.ln(),
            Self::Lgamma => lgamma(x),
            Self::Neg => -x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Self::Sigmoid => y * (1.0 - y),
            Self::Tanh => 1.0 - y * y,
            Self::Softplus => sigmoid(x),
            Self::Exp => y,
            Self::Log => 1.0 / x,
            Self::Lgamma => digamma(x),
            Self::Neg => -1.0,
        }
    }

    fn needs_positive(self) -> bool {
        matches!(self, Self::Log | Self::Lgamma)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` evaluated as `log1p(e^{−|x|}) + max(x, 0)`.
pub fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary { x: usize, kind: Elementwise },
    // `b` is broadcast over leading axes of `a` (its shape is a suffix of a's, or it is a scalar).
    Binary { a: usize, b: usize, kind: Binary },
    Scale { x: usize, c: f64 },
    Offset { x: usize },
    MatMul { a: usize, b: usize },
    Conv1d { x: usize, w: usize, bias: Option<usize>, stride: usize, pad: usize },
    AvgPool { x: usize, k: usize, stride: usize },
    GlobalAvgPool { x: usize },
    Mask { x: usize, mask: Vec<f64> },
    Sum { x: usize, axis: Option<usize> },
    Concat { xs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape { x: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    SegmentSum { x: usize, seg: Vec<usize>, scale: Vec<f64> },
    SegmentPick { x: usize, pick: Vec<Option<usize>> },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::Offset { x }
            | Op::AvgPool { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Mask { x, .. }
            | Op::Sum { x, .. }
            | Op::Slice { x, .. }
            | Op::Reshape { x }
            | Op::GatherRows { x, .. }
            | Op::SegmentSum { x, .. }
            | Op::SegmentPick { x, .. } => vec![*x],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![*a, *b],
            Op::Conv1d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::Concat { xs, .. } => xs.clone(),
        }
    }
}

struct Entry {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    entries: RefCell<Vec<Entry>>,
    backward_done: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tape entry.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

/// (outer, extent, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Views a rank-2 or rank-3 signal as `(batch, channels, length)`.
fn signal_dims(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, l] => Ok((1, c, l)),
        [b, c, l] => Ok((b, c, l)),
        _ => Err(dim_err(format!("{op} expects [C×L] or [B×C×L], got {shape:?}"))),
    }
}

fn with_length(shape: &[usize], len: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank ≥ 2") = len;
    s
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded entries.
    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut entries = self.entries.borrow_mut();
        entries.push(Entry {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: entries.len() - 1,
        }
    }

    fn record(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let entries = self.entries.borrow();
            op.inputs().iter().any(|&i| entries[i].requires_grad)
        };
        self.push(value, op, requires_grad)
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.entries.borrow(), |e| &e[id].value)
    }

    /// Accumulates gradients of the scalar `loss` into every reachable
    /// differentiable entry. May be called once per tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        let entries = self.entries.borrow();
        let loss_shape = entries[loss.id].value.shape().to_vec();
        if entries[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.backward_done.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = (0..entries.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let entry = &entries[id];
            if entry.requires_grad {
                backprop(&entries, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = entries.iter().map(|e| e.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(entries.iter())
            .map(|(g, e)| {
                g.filter(|_| e.requires_grad)
                    .map(|g| Tensor::from_raw(e.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Adds `delta` into the gradient slot of `target` when it needs one.
fn accumulate(
    entries: &[Entry],
    grads: &mut [Option<Vec<f64>>],
    target: usize,
    delta: impl FnOnce(&mut [f64]),
) {
    if !entries[target].requires_grad {
        return;
    }
    let n = entries[target].value.numel();
    let slot = grads[target].get_or_insert_with(|| vec![0.0; n]);
    delta(slot);
}

fn backprop(entries: &[Entry], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &entries[id].value;
    match &entries[id].op {
        Op::Leaf => {}
        Op::Unary { x, kind } => {
            let xv = entries[*x].value.data();
            let yv = out.data();
            accumulate(entries, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * kind.derivative(xv[i], yv[i]);
                }
            });
        }
        Op::Binary { a, b, kind } => {
            let av = entries[*a].value.data();
            let bv = entries[*b].value.data();
            let nb = bv.len();
            accumulate(entries, grads, *a, |d| match kind {
                Binary::Add | Binary::Sub => d.iter_mut().zip(g).for_each(|(d, g)| *d += g),
                Binary::Mul => {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i % nb];
                    }
                }
            });
            accumulate(entries, grads, *b, |d| {
                for i in 0..g.len() {
                    d[i % nb] += match kind {
                        Binary::Add => g[i],
                        Binary::Sub => -g[i],
                        Binary::Mul => g[i] * av[i],
                    };
                }
            });
        }
        Op::Scale { x, c } => accumulate(entries, grads, *x, |d| {
            d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)
        }),
        Op::Offset { x } | Op::Reshape { x } => accumulate(entries, grads, *x, |d| {
            d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
        }),
        Op::Mask { x, mask } => accumulate(entries, grads, *x, |d| {
            for i in 0..d.len() {
                d[i] += g[i] * mask[i];
            }
        }),
        Op::MatMul { a, b } => {
            let av = &entries[*a].value;
            let bv = &entries[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let (ad, bd) = (av.data(), bv.data());
            // dA = dC·Bᵀ
            accumulate(entries, grads, *a, |d| {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bd[p * n + j];
                        }
                        d[i * k + p] += s;
                    }
                }
            });
            // dB = Aᵀ·dC
            accumulate(entries, grads, *b, |d| {
                for i in 0..m {
                    for p in 0..k {
                        let a_ip = ad[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        let row = &mut d[p * n..(p + 1) * n];
                        for (dj, gj) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *dj += a_ip * gj;
                        }
                    }
                }
            });
        }
        Op::Conv1d {
            x,
            w,
            bias,
            stride,
            pad,
        } => {
            let xv = &entries[*x].value;
            let wv = &entries[*w].value;
            let (batch, c_in, len) = signal_dims(xv.shape(), "conv1d").expect("checked in forward");
            let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
            let len_out = *out.shape().last().expect("rank ≥ 2");
            let (xd, wd) = (xv.data(), wv.data());
            let windows = conv_windows(len, len_out, k, *stride, *pad);
            accumulate(entries, grads, *x, |d| {
                for bi in 0..batch {
                    for co in 0..c_out {
                        let gy = &g[(bi * c_out + co) * len_out..][..len_out];
                        for ci in 0..c_in {
                            let dx = &mut d[(bi * c_in + ci) * len..][..len];
                            for (kk, range) in windows.iter().enumerate() {
                                let wk = wd[(co * c_in + ci) * k + kk];
                                for o in range.clone() {
                                    dx[o * stride + kk - pad] += wk * gy[o];
                                }
                            }
                        }
                    }
                }
            });
            accumulate(entries, grads, *w, |d| {
                for bi in 0..batch {
                    for co in 0..c_out {
                        let gy = &g[(bi * c_out + co) * len_out..][..len_out];
                        for ci in 0..c_in {
                            let xs = &xd[(bi * c_in + ci) * len..][..len];
                            for (kk, range) in windows.iter().enumerate() {
                                let mut s = 0.0;
                                for o in range.clone() {
                                    s += gy[o] * xs[o * stride + kk - pad];
                                }
                                d[(co * c_in + ci) * k + kk] += s;
                            }
                        }
                    }
                }
            });
            if let Some(b) = bias {
                accumulate(entries, grads, *b, |d| {
                    for bi in 0..batch {
                        for co in 0..c_out {
                            d[co] += g[(bi * c_out + co) * len_out..][..len_out].iter().sum::<f64>();
                        }
                    }
                });
            }
        }
        Op::AvgPool { x, k, stride } => {
            let xv = &entries[*x].value;
            let len = *xv.shape().last().expect("rank ≥ 2");
            let len_out = *out.shape().last().expect("rank ≥ 2");
            let rows = xv.numel() / len;
            let inv = 1.0 / *k as f64;
            accumulate(entries, grads, *x, |d| {
                for r in 0..rows {
                    for o in 0..len_out {
                        let go = g[r * len_out + o] * inv;
                        for j in 0..*k {
                            d[r * len + o * stride + j] += go;
                        }
                    }
                }
            });
        }
        Op::GlobalAvgPool { x } => {
            let xv = &entries[*x].value;
            let len = *xv.shape().last().expect("rank ≥ 2");
            let inv = 1.0 / len as f64;
            accumulate(entries, grads, *x, |d| {
                for (i, di) in d.iter_mut().enumerate() {
                    *di += g[i / len] * inv;
                }
            });
        }
        Op::Sum { x, axis } => {
            let xv = &entries[*x].value;
            match axis {
                None => accumulate(entries, grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
                Some(axis) => {
                    let (outer, n, inner) = split_axis(xv.shape(), *axis);
                    accumulate(entries, grads, *x, |d| {
                        for o in 0..outer {
                            for a in 0..n {
                                for i in 0..inner {
                                    d[(o * n + a) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &xi in xs {
                let n = entries[xi].value.shape()[*axis];
                accumulate(entries, grads, xi, |d| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..][..n * inner];
                        for (d, s) in d[o * n * inner..][..n * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                offset += n;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, n, inner) = split_axis(entries[*x].value.shape(), *axis);
            let m = out.shape()[*axis];
            accumulate(entries, grads, *x, |d| {
                for o in 0..outer {
                    let dst = &mut d[(o * n + start) * inner..][..m * inner];
                    for (d, s) in dst.iter_mut().zip(&g[o * m * inner..][..m * inner]) {
                        *d += s;
                    }
                }
            });
        }
        Op::GatherRows { x, idx } => {
            let width = out.shape()[1];
            accumulate(entries, grads, *x, |d| {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..width {
                        d[src * width + j] += g[r * width + j];
                    }
                }
            });
        }
        Op::SegmentSum { x, seg, scale } => {
            let width = out.shape()[1];
            accumulate(entries, grads, *x, |d| {
                for (r, (&s, &c)) in seg.iter().zip(scale).enumerate() {
                    for j in 0..width {
                        d[r * width + j] += c * g[s * width + j];
                    }
                }
            });
        }
        Op::SegmentPick { x, pick } => accumulate(entries, grads, *x, |d| {
            for (o, p) in pick.iter().enumerate() {
                if let Some(src) = p {
                    d[*src] += g[o];
                }
            }
        }),
    }
}

/// For each kernel tap, the output positions whose input index is in bounds.
fn conv_windows(len: usize, len_out: usize, k: usize, stride: usize, pad: usize) -> Vec<Range<usize>> {
    (0..k)
        .map(|kk| {
            // need pad ≤ o·stride + kk < len + pad
            let lo = pad.saturating_sub(kk).div_ceil(stride);
            let hi = if len + pad > kk {
                ((len + pad - kk - 1) / stride + 1).min(len_out)
            } else {
                0
            };
            lo.min(hi)..hi
        })
        .collect()
}

/// Segment reduction for the `pick` family (max / min).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extremum {
    Max,
    Min,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.tape.value(self.id).item()
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Precondition("operands live on different tapes".into()))
        }
    }

    pub fn elementwise(self, kind: Elementwise) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value(self.id);
            if kind.needs_positive() && x.data().iter().any(|&v| v <= 0.0) {
                return Err(Error::Domain(format!("{} requires strictly positive input", kind.name())));
            }
            let data: Vec<f64> = x.data().iter().map(|&v| kind.eval(v)).collect();
            check_finite(&data, kind.name())?;
            Tensor::from_raw(x.shape().to_vec(), data)
        };
        Ok(self.tape.record(out, Op::Unary { x: self.id, kind }))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Relu)
    }
    pub fn leaky_relu(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::LeakyRelu)
    }
    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Sigmoid)
    }
    pub fn tanh(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Tanh)
    }
    pub fn softplus(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Softplus)
    }
    pub fn exp(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Exp)
    }
    pub fn log(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Log)
    }
    pub fn lgamma(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Lgamma)
    }
    pub fn neg(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Neg)
    }

    fn binary(self, other: Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let broadcastable = b.numel() == 1 || a.shape().ends_with(b.shape());
            if !broadcastable || b.numel() == 0 && a.numel() != 0 {
                return Err(dim_err(format!(
                    "{name}: cannot broadcast {:?} onto {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
            let nb = b.numel().max(1);
            let (ad, bd) = (a.data(), b.data());
            let data: Vec<f64> = (0..ad.len())
                .map(|i| {
                    let bv = bd[i % nb];
                    match kind {
                        Binary::Add => ad[i] + bv,
                        Binary::Sub => ad[i] - bv,
                        Binary::Mul => ad[i] * bv,
                    }
                })
                .collect();
            check_finite(&data, name)?;
            Tensor::from_raw(a.shape().to_vec(), data)
        };
        Ok(self.tape.record(
            out,
            Op::Binary {
                a: self.id,
                b: other.id,
                kind,
            },
        ))
    }

    /// `self + other`, broadcasting `other` over leading axes.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value(self.id);
            let data: Vec<f64> = x.data().iter().map(|v| v * c).collect();
            check_finite(&data, "scale")?;
            Tensor::from_raw(x.shape().to_vec(), data)
        };
        Ok(self.tape.record(out, Op::Scale { x: self.id, c }))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value(self.id);
            let data: Vec<f64> = x.data().iter().map(|v| v + c).collect();
            check_finite(&data, "add_scalar")?;
            Tensor::from_raw(x.shape().to_vec(), data)
        };
        Ok(self.tape.record(out, Op::Offset { x: self.id }))
    }

    /// Matrix product `[m×k]·[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
                return Err(dim_err(format!(
                    "matmul expects matrices, got {:?} and {:?}",
                    a.shape(),
                    b.shape()
                )));
            };
            if k != k2 {
                return Err(dim_err(format!("matmul inner dimensions {k} and {k2} differ")));
            }
            let (ad, bd) = (a.data(), b.data());
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut data[i * n..(i + 1) * n];
                for p in 0..k {
                    let a_ip = ad[i * k + p];
                    if a_ip == 0.0 {
                        continue;
                    }
                    for (r, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                        *r += a_ip * bv;
                    }
                }
            }
            check_finite(&data, "matmul")?;
            Tensor::from_raw(vec![m, n], data)
        };
        Ok(self.tape.record(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Cross-correlation of `self` (`[C_in×L]` or `[B×C_in×L]`) with
    /// `kernels` (`[C_out×C_in×k]`), zero padding `pad` on both sides.
    pub fn conv1d(
        self,
        kernels: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&kernels)?;
        if let Some(b) = &bias {
            self.same_tape(b)?;
        }
        if stride == 0 {
            return Err(dim_err("conv1d stride must be ≥ 1".into()));
        }
        let out = {
            let x = self.tape.value(self.id);
            let w = self.tape.value(kernels.id);
            let (batch, c_in, len) = signal_dims(x.shape(), "conv1d")?;
            let &[c_out, wc_in, k] = w.shape() else {
                return Err(dim_err(format!("conv1d kernels must be [C_out×C_in×k], got {:?}", w.shape())));
            };
            if wc_in != c_in {
                return Err(dim_err(format!("conv1d: input has {c_in} channels, kernels expect {wc_in}")));
            }
            if k == 0 || k > len + 2 * pad {
                return Err(dim_err(format!("conv1d: kernel {k} does not fit length {len} with padding {pad}")));
            }
            let len_out = (len + 2 * pad - k) / stride + 1;
            let bias_vals = match &bias {
                Some(b) => {
                    let b = self.tape.value(b.id);
                    if b.shape() != [c_out] {
                        return Err(dim_err(format!("conv1d bias must be [{c_out}], got {:?}", b.shape())));
                    }
                    b.data().to_vec()
                }
                None => vec![0.0; c_out],
            };
            let windows = conv_windows(len, len_out, k, stride, pad);
            let (xd, wd) = (x.data(), w.data());
            let mut data = vec![0.0; batch * c_out * len_out];
            for bi in 0..batch {
                for co in 0..c_out {
                    let y = &mut data[(bi * c_out + co) * len_out..][..len_out];
                    y.iter_mut().for_each(|v| *v = bias_vals[co]);
                    for ci in 0..c_in {
                        let xs = &xd[(bi * c_in + ci) * len..][..len];
                        for (kk, range) in windows.iter().enumerate() {
                            let wk = wd[(co * c_in + ci) * k + kk];
                            for o in range.clone() {
                                y[o] += wk * xs[o * stride + kk - pad];
                            }
                        }
                    }
                }
            }
            check_finite(&data, "conv1d")?;
            let mut shape = x.shape().to_vec();
            let r = shape.len();
            shape[r - 2] = c_out;
            shape[r - 1] = len_out;
            Tensor::from_raw(shape, data)
        };
        Ok(self.tape.record(
            out,
            Op::Conv1d {
                x: self.id,
                w: kernels.id,
                bias: bias.map(|b| b.id),
                stride,
                pad,
            },
        ))
    }

    /// Windowed mean over the last axis of a `[C×L]` or `[B×C×L]` signal.
    pub fn avg_pool1d(self, k: usize, stride: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value(self.id);
            let (_, _, len) = signal_dims(x.shape(), "avg_pool1d")?;
            if k == 0 || stride == 0 || k > len {
                return Err(dim_err(format!("avg_pool1d: window {k} / stride {stride} invalid for length {len}")));
            }
            let len_out = (len - k) / stride + 1;
            let rows = x.numel() / len;
            let inv = 1.0 / k as f64;
            let mut data = Vec::with_capacity(rows * len_out);
            for r in 0..rows {
                let xs = &x.data()[r * len..][..len];
                for o in 0..len_out {
                    data.push(xs[o * stride..o * stride + k].iter().sum::<f64>() * inv);
                }
            }
            Tensor::from_raw(with_length(x.shape(), len_out), data)
        };
        Ok(self.tape.record(out, Op::AvgPool { x: self.id, k, stride }))
    }

    /// Per-channel mean over the last axis: `[C×L] → [C]`, `[B×C×L] → [B×C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value(self.id);
            let (_, _, len) = signal_dims(x.shape(), "global_avg_pool")?;
            if len == 0 {
                return Err(dim_err("global_avg_pool on empty signal".into()));
            }
            let data: Vec<f64> = x
                .data()
                .chunks(len)
                .map(|c| c.iter().sum::<f64>() / len as f64)
                .collect();
            let shape = x.shape()[..x.ndim() - 1].to_vec();
            Tensor::from_raw(shape, data)
        };
        Ok(self.tape.record(out, Op::GlobalAvgPool { x: self.id }))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(self, rate: f64, training: bool, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Precondition(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(self);
        }
        let keep = 1.0 / (1.0 - rate);
        let (out, mask) = {
            let x = self.tape.value(self.id);
            let mask: Vec<f64> = (0..x.numel())
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect();
            let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            (Tensor::from_raw(x.shape().to_vec(), data), mask)
        };
        Ok(self.tape.record(out, Op::Mask { x: self.id, mask }))
    }

    /// Sum over `axis`, or over everything (shape `[1]`) when `None`.
    pub fn sum(self, axis: Option<usize>) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value(self.id);
            match axis {
                None => Tensor::scalar(x.data().iter().sum()),
                Some(axis) => {
                    if axis >= x.ndim() {
                        return Err(dim_err(format!("axis {axis} out of range for {:?}", x.shape())));
                    }
                    let (outer, n, inner) = split_axis(x.shape(), axis);
                    let mut data = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for a in 0..n {
                            for i in 0..inner {
                                data[o * inner + i] += x.data()[(o * n + a) * inner + i];
                            }
                        }
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(axis);
                    if shape.is_empty() {
                        shape.push(1);
                    }
                    Tensor::from_raw(shape, data)
                }
            }
        };
        Ok(self.tape.record(out, Op::Sum { x: self.id, axis }))
    }

    pub fn mean(self, axis: Option<usize>) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = match axis {
            None => shape.iter().product::<usize>(),
            Some(a) => *shape
                .get(a)
                .ok_or_else(|| dim_err(format!("axis {a} out of range for {shape:?}")))?,
        };
        if n == 0 {
            return Err(dim_err("mean over an empty axis".into()));
        }
        self.sum(axis)?.scale(1.0 / n as f64)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = xs
            .first()
            .ok_or_else(|| dim_err("concat of zero tensors".into()))?;
        let tape = first.tape;
        let out = {
            let vals: Vec<Ref<'_, Tensor>> = xs
                .iter()
                .map(|v| {
                    first.same_tape(v)?;
                    Ok(tape.value(v.id))
                })
                .collect::<Result<_>>()?;
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(dim_err(format!("axis {axis} out of range for {base:?}")));
            }
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(dim_err(format!("concat: {:?} vs {base:?} along axis {axis}", s)));
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let n = v.shape()[axis];
                    data.extend_from_slice(&v.data()[o * n * inner..][..n * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::from_raw(shape, data)
        };
        Ok(tape.record(
            out,
            Op::Concat {
                xs: xs.iter().map(|v| v.id).collect(),
                axis,
            },
        ))
    }

    /// Sub-range `range` along `axis`.
    pub fn slice(self, axis: usize, range: Range<usize>) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value(self.id);
            if axis >= x.ndim() {
                return Err(dim_err(format!("axis {axis} out of range for {:?}", x.shape())));
            }
            let (outer, n, inner) = split_axis(x.shape(), axis);
            if range.start > range.end || range.end > n {
                return Err(dim_err(format!("slice {range:?} out of bounds 0..{n}")));
            }
            let m = range.len();
            let mut data = Vec::with_capacity(outer * m * inner);
            for o in 0..outer {
                data.extend_from_slice(&x.data()[(o * n + range.start) * inner..][..m * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = m;
            Tensor::from_raw(shape, data)
        };
        Ok(self.tape.record(
            out,
            Op::Slice {
                x: self.id,
                axis,
                start: range.start,
            },
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.tape.value(self.id).reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape { x: self.id }))
    }

    /// Rows of a `[N×d]` matrix selected by `idx` (repeats allowed): `[|idx|×d]`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value(self.id);
            let &[n, d] = x.shape() else {
                return Err(dim_err(format!("gather_rows expects a matrix, got {:?}", x.shape())));
            };
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                if i >= n {
                    return Err(dim_err(format!("row index {i} out of range for {n} rows")));
                }
                data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
            }
            Tensor::from_raw(vec![idx.len(), d], data)
        };
        Ok(self.tape.record(
            out,
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Scatter-add of rows into `n_segments` buckets: row `r` contributes
    /// `scale[r]·x[r]` to output row `seg[r]`. Empty segments are zero.
    pub fn segment_sum(self, seg: &[usize], scale: &[f64], n_segments: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value(self.id);
            let &[rows, d] = x.shape() else {
                return Err(dim_err(format!("segment_sum expects a matrix, got {:?}", x.shape())));
            };
            if seg.len() != rows || scale.len() != rows {
                return Err(dim_err(format!(
                    "segment_sum: {rows} rows but {} segment ids / {} scales",
                    seg.len(),
                    scale.len()
                )));
            }
            let mut data = vec![0.0; n_segments * d];
            for (r, (&s, &c)) in seg.iter().zip(scale).enumerate() {
                if s >= n_segments {
                    return Err(dim_err(format!("segment id {s} ≥ {n_segments}")));
                }
                for j in 0..d {
                    data[s * d + j] += c * x.data()[r * d + j];
                }
            }
            Tensor::from_raw(vec![n_segments, d], data)
        };
        Ok(self.tape.record(
            out,
            Op::SegmentSum {
                x: self.id,
                seg: seg.to_vec(),
                scale: scale.to_vec(),
            },
        ))
    }

    /// Per-segment elementwise max or min; empty segments are zero.
    pub fn segment_extremum(self, seg: &[usize], n_segments: usize, which: Extremum) -> Result<Var<'t>> {
        let (out, pick) = {
            let x = self.tape.value(self.id);
            let &[rows, d] = x.shape() else {
                return Err(dim_err(format!("segment_extremum expects a matrix, got {:?}", x.shape())));
            };
            if seg.len() != rows {
                return Err(dim_err(format!("segment_extremum: {rows} rows but {} ids", seg.len())));
            }
            let mut pick: Vec<Option<usize>> = vec![None; n_segments * d];
            for (r, &s) in seg.iter().enumerate() {
                if s >= n_segments {
                    return Err(dim_err(format!("segment id {s} ≥ {n_segments}")));
                }
                for j in 0..d {
                    let src = r * d + j;
                    let slot = &mut pick[s * d + j];
                    let better = match *slot {
                        None => true,
                        Some(cur) => match which {
                            Extremum::Max => x.data()[src] > x.data()[cur],
                            Extremum::Min => x.data()[src] < x.data()[cur],
                        },
                    };
                    if better {
                        *slot = Some(src);
                    }
                }
            }
            let data = pick.iter().map(|p| p.map_or(0.0, |i| x.data()[i])).collect();
            (Tensor::from_raw(vec![n_segments, d], data), pick)
        };
        Ok(self.tape.record(out, Op::SegmentPick { x: self.id, pick }))
    }
}
