//! Run-to-failure experiments and their on-disk layout.
//!
//! ```text
//! <root>/dataset.txt             kind, time_scale
//! <root>/{train,test}/<id>/meta.txt       key = value lines
//! <root>/{train,test}/<id>/segments.bin   "RULSEG01", u64 n, C, L, then f64 LE
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{io_err, Error, Result};
use crate::gradcore::Tensor;

const SEGMENT_MAGIC: &[u8; 8] = b"RULSEG01";

/// One run-to-failure record.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub id: String,
    pub condition: String,
    /// Observation times in seconds, strictly increasing.
    pub timestamps: Vec<f64>,
    /// One `[C×L]` segment per timestamp.
    pub segments: Vec<Tensor>,
    pub failure_time: f64,
    /// Latent degradation value per observation (simulated data only).
    pub latent: Option<Vec<f64>>,
}

impl Experiment {
    pub fn new(
        id: impl Into<String>,
        condition: impl Into<String>,
        timestamps: Vec<f64>,
        segments: Vec<Tensor>,
        failure_time: f64,
        latent: Option<Vec<f64>>,
    ) -> Result<Self> {
        let id = id.into();
        if timestamps.is_empty() {
            return Err(Error::Precondition(format!("experiment {id} has no observations")));
        }
        if timestamps.len() != segments.len() {
            return Err(Error::Dimension(format!(
                "experiment {id}: {} timestamps but {} segments",
                timestamps.len(),
                segments.len()
            )));
        }
        if !timestamps.iter().all(|t| t.is_finite()) || timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Precondition(format!("experiment {id}: timestamps must strictly increase")));
        }
        let last = *timestamps.last().expect("nonempty");
        if !failure_time.is_finite() || failure_time < last {
            return Err(Error::Precondition(format!(
                "experiment {id}: failure time {failure_time} precedes last observation {last}"
            )));
        }
        let shape = segments[0].shape().to_vec();
        if shape.len() != 2 || segments.iter().any(|s| s.shape() != shape.as_slice()) {
            return Err(Error::Dimension(format!("experiment {id}: segments must share one [C×L] shape")));
        }
        if latent.as_ref().is_some_and(|z| z.len() != timestamps.len()) {
            return Err(Error::Dimension(format!("experiment {id}: latent path length mismatch")));
        }
        Ok(Self {
            id,
            condition: condition.into(),
            timestamps,
            segments,
            failure_time,
            latent,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.segments[0].shape()[0]
    }

    pub fn segment_len(&self) -> usize {
        self.segments[0].shape()[1]
    }

    /// Remaining useful life at observation `k`, in seconds.
    pub fn rul(&self, k: usize) -> f64 {
        self.failure_time - self.timestamps[k]
    }
}

/// Train and test experiments plus the time scale used to normalise Δt and RUL.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: String,
    pub time_scale: f64,
    pub train: Vec<Experiment>,
    pub test: Vec<Experiment>,
}

impl Dataset {
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let header = format!("kind = {}\ntime_scale = {}\n", self.kind, self.time_scale);
        write(&root.join("dataset.txt"), header.as_bytes())?;
        for (split, exps) in [("train", &self.train), ("test", &self.test)] {
            let dir = root.join(split);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for exp in exps {
                save_experiment(exp, &dir.join(&exp.id))?;
            }
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let header_path = root.join("dataset.txt");
        let header = read_kv(&header_path)?;
        let kind = lookup(&header, "kind", &header_path)?.to_string();
        let time_scale = parse_f64(lookup(&header, "time_scale", &header_path)?, &header_path)?;
        if time_scale <= 0.0 {
            return Err(Error::Format {
                path: header_path,
                msg: "time_scale must be positive".into(),
            });
        }
        let mut splits = Vec::new();
        for split in ["train", "test"] {
            let dir = root.join(split);
            let mut ids: Vec<PathBuf> = match fs::read_dir(&dir) {
                Ok(entries) => entries
                    .map(|e| e.map(|e| e.path()).map_err(io_err(&dir)))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .filter(|p| p.is_dir())
                    .collect(),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(io_err(&dir)(e)),
            };
            ids.sort();
            splits.push(ids.iter().map(|p| load_experiment(p)).collect::<Result<Vec<_>>>()?);
        }
        let test = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        Ok(Self {
            kind,
            time_scale,
            train,
            test,
        })
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn save_experiment(exp: &Experiment, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut meta = format!(
        "id = {}\ncondition = {}\nfailure_time = {}\nobservations = {}\ntimestamps = {}\n",
        exp.id,
        exp.condition,
        exp.failure_time,
        exp.len(),
        join_floats(&exp.timestamps)
    );
    if let Some(z) = &exp.latent {
        meta.push_str(&format!("latent = {}\n", join_floats(z)));
    }
    write(&dir.join("meta.txt"), meta.as_bytes())?;

    let (c, l) = (exp.channels(), exp.segment_len());
    let mut bytes = Vec::with_capacity(32 + exp.len() * c * l * 8);
    bytes.extend_from_slice(SEGMENT_MAGIC);
    for n in [exp.len(), c, l] {
        bytes.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for seg in &exp.segments {
        for v in seg.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write(&dir.join("segments.bin"), &bytes)
}

fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let (k, v) = l.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn lookup<'a>(kv: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    kv.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("missing key `{key}`"),
        })
}

fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: format!("`{s}` is not a number"),
    })
}

fn parse_floats(s: &str, path: &Path) -> Result<Vec<f64>> {
    s.split_whitespace().map(|t| parse_f64(t, path)).collect()
}

fn load_experiment(dir: &Path) -> Result<Experiment> {
    let meta_path = dir.join("meta.txt");
    let meta = read_kv(&meta_path)?;
    let id = lookup(&meta, "id", &meta_path)?.to_string();
    let condition = lookup(&meta, "condition", &meta_path)?.to_string();
    let failure_time = parse_f64(lookup(&meta, "failure_time", &meta_path)?, &meta_path)?;
    let timestamps = parse_floats(lookup(&meta, "timestamps", &meta_path)?, &meta_path)?;
    let latent = match lookup(&meta, "latent", &meta_path) {
        Ok(s) => Some(parse_floats(s, &meta_path)?),
        Err(_) => None,
    };

    let seg_path = dir.join("segments.bin");
    let bytes = fs::read(&seg_path).map_err(io_err(&seg_path))?;
    let bad = |msg: &str| Error::Format {
        path: seg_path.clone(),
        msg: msg.to_string(),
    };
    if bytes.len() < 32 || &bytes[..8] != SEGMENT_MAGIC {
        return Err(bad("missing segment header"));
    }
    let dim = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize;
    let (n, c, l) = (dim(0), dim(1), dim(2));
    if n != timestamps.len() {
        return Err(bad(&format!("{n} segments for {} timestamps", timestamps.len())));
    }
    if bytes.len() != 32 + n * c * l * 8 {
        return Err(bad("segment payload length does not match header"));
    }
    let values: Vec<f64> = bytes[32..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let segments = values
        .chunks(c * l)
        .map(|chunk| Tensor::new(vec![c, l], chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Experiment::new(id, condition, timestamps, segments, failure_time, latent)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(id: &str, latent: bool) -> Experiment {
        let segs = (0..3)
            .map(|k| Tensor::new(vec![2, 4], (0..8).map(|i| (k * 8 + i) as f64 * 0.1).collect()).unwrap())
            .collect();
        let z = latent.then(|| vec![0.1, 0.2, 0.35]);
        Experiment::new(id, "A", vec![0.0, 10.0, 20.0], segs, 25.0, z).unwrap()
    }

    #[test]
    fn validation() {
        let seg = || Tensor::zeros(vec![1, 4]);
        assert!(Experiment::new("x", "A", vec![1.0, 1.0], vec![seg(), seg()], 5.0, None).is_err());
        assert!(Experiment::new("x", "A", vec![1.0, 2.0], vec![seg(), seg()], 1.5, None).is_err());
        assert!(Experiment::new("x", "A", vec![1.0], vec![seg(), seg()], 5.0, None).is_err());
        assert!(Experiment::new("x", "A", vec![1.0, 2.0], vec![seg(), Tensor::zeros(vec![1, 5])], 5.0, None).is_err());
        let e = Experiment::new("x", "A", vec![1.0, 2.0], vec![seg(), seg()], 5.0, None).unwrap();
        assert_eq!(e.rul(1), 3.0);
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            kind: "simulated".into(),
            time_scale: 1000.0,
            train: vec![toy("e00", true), toy("e01", false)],
            test: vec![toy("e02", true)],
        };
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn corrupt_segments_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            kind: "simulated".into(),
            time_scale: 1.0,
            train: vec![toy("e00", false)],
            test: vec![],
        };
        ds.save(dir.path()).unwrap();
        let seg = dir.path().join("train/e00/segments.bin");
        let mut bytes = fs::read(&seg).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&seg, bytes).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Format { .. })));
    }
}
