//! Learnable functions of the GNN-tCNN model and the LSTM-tCNN baseline.

mod checkpoint;
mod gnn;
mod layers;
mod lstm;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gnn::{gnn_tcnn_forward, gnn_tcnn_forward_batch};
pub use layers::{core_edge_update, core_node_update, decode_gamma, edge_encode, tcnn_encode, tcnn_output_len, EPS0};
pub use lstm::{lstm_tcnn_forward, lstm_tcnn_forward_batch};

use crate::error::{Error, Result};
use crate::gradcore::{BoundParams, Parameters, Tape, Tensor, Var};
use crate::graphnet::Aggregation;
use crate::prob::GammaParams;
use crate::rng::{label, stream};
use crate::sampler::CausalSample;

/// Shortest segment the three stride-2 stacks accept.
pub const MIN_SEGMENT_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Width `d` of encoded node and edge attributes.
    pub latent: usize,
    /// Hidden width `w` of the core, edge-encoder and head MLPs.
    pub hidden: usize,
    /// Number of shared-weight core applications.
    pub n_core: usize,
    pub channels: usize,
    pub segment_len: usize,
    pub dropout: f64,
    /// Seconds per normalised time unit for `Δt` and RUL.
    pub time_scale: f64,
    pub aggregation: Aggregation,
    pub lstm_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent: 15,
            hidden: 30,
            n_core: 3,
            channels: 1,
            segment_len: 1000,
            dropout: 0.2,
            time_scale: 1000.0,
            aggregation: Aggregation::Mean,
            lstm_hidden: 30,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.hidden == 0 || self.n_core == 0 || self.channels == 0 || self.lstm_hidden == 0 {
            return Err(Error::Config("model widths, channels and n_core must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.segment_len < MIN_SEGMENT_LEN {
            return Err(Error::Config(format!(
                "segment length {} below the minimum {MIN_SEGMENT_LEN}",
                self.segment_len
            )));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(Error::Config(format!("time_scale must be positive, got {}", self.time_scale)));
        }
        Ok(())
    }

    /// `key = value` lines covering every field.
    pub fn manifest(&self) -> String {
        format!(
            "latent = {}\nhidden = {}\nn_core = {}\nchannels = {}\nsegment_len = {}\ndropout = {}\ntime_scale = {}\naggregation = {}\nlstm_hidden = {}\n",
            self.latent,
            self.hidden,
            self.n_core,
            self.channels,
            self.segment_len,
            self.dropout,
            self.time_scale,
            format!("{:?}", self.aggregation).to_lowercase(),
            self.lstm_hidden
        )
    }

    /// Inverse of [`ModelConfig::manifest`]. Unknown keys are rejected.
    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed manifest line `{line}`")))?;
            let v = v.trim();
            let num = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("bad integer `{v}`")));
            let real = |v: &str| v.parse::<f64>().map_err(|_| Error::Config(format!("bad number `{v}`")));
            match k.trim() {
                "latent" => cfg.latent = num(v)?,
                "hidden" => cfg.hidden = num(v)?,
                "n_core" => cfg.n_core = num(v)?,
                "channels" => cfg.channels = num(v)?,
                "segment_len" => cfg.segment_len = num(v)?,
                "dropout" => cfg.dropout = real(v)?,
                "time_scale" => cfg.time_scale = real(v)?,
                "aggregation" => cfg.aggregation = v.parse()?,
                "lstm_hidden" => cfg.lstm_hidden = num(v)?,
                "kind" => {}
                other => return Err(Error::Config(format!("unknown model manifest key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    GnnTcnn,
    LstmTcnn,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::GnnTcnn => "gnn-tcnn",
            ModelKind::LstmTcnn => "lstm-tcnn",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "gnn-tcnn" => Ok(Self::GnnTcnn),
            "lstm-tcnn" => Ok(Self::LstmTcnn),
            other => Err(Error::Config(format!("unknown model `{other}` (expected gnn-tcnn or lstm-tcnn)"))),
        }
    }
}

/// Name and shape of every parameter, in initialisation order, with the
/// fan-in used for its initialisation range.
fn layout(kind: ModelKind, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    let mut dense = |name: &str, fan_in: usize, fan_out: usize| {
        out.push((format!("{name}.w"), vec![fan_in, fan_out], fan_in));
        out.push((format!("{name}.b"), vec![fan_out], fan_in));
    };
    let (d, w) = (cfg.latent, cfg.hidden);
    let mut convs = Vec::new();
    let mut c_in = cfg.channels;
    for stack in 0..3 {
        for (i, (c_out, k)) in layers::TCNN_STACK.iter().enumerate() {
            convs.push((format!("tcnn.s{stack}.c{}", i + 1), *c_out, c_in, *k));
            c_in = *c_out;
        }
    }
    dense("tcnn.dense", c_in, d);
    let head_in = match kind {
        ModelKind::GnnTcnn => {
            dense("edge_enc.l1", 1, w);
            dense("edge_enc.l2", w, d);
            for (name, width) in [("core_edge", 3 * d), ("core_node", 2 * d)] {
                dense(&format!("{name}.gate"), width, w);
                dense(&format!("{name}.act"), width, w);
                dense(&format!("{name}.out"), w, d);
            }
            dense("dec.node", d, d);
            d
        }
        ModelKind::LstmTcnn => {
            let h = cfg.lstm_hidden;
            dense("lstm.x", d + 1, 4 * h);
            dense("lstm.h", h, 4 * h);
            h
        }
    };
    for head in ["head_alpha", "head_beta"] {
        dense(&format!("{head}.l1"), head_in, w);
        dense(&format!("{head}.l2"), w, 1);
    }
    let mut all: Vec<(String, Vec<usize>, usize)> = convs
        .into_iter()
        .flat_map(|(name, c_out, c_in, k)| {
            [
                (format!("{name}.w"), vec![c_out, c_in, k], c_in * k),
                (format!("{name}.b"), vec![c_out], c_in * k),
            ]
        })
        .collect();
    all.extend(out);
    all
}

/// Parameters drawn uniformly from `±√(1/fan_in)`.
pub fn init_params(kind: ModelKind, cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut rng = stream(seed, &[label("init"), label(&kind.to_string())]);
    let mut params = Parameters::new();
    for (name, shape, fan_in) in layout(kind, cfg) {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

/// Checks that `params` has exactly the layout `init_params` would produce.
pub fn check_layout(kind: ModelKind, cfg: &ModelConfig, params: &Parameters) -> Result<()> {
    let expected = layout(kind, cfg);
    let matches = expected.len() == params.len()
        && expected
            .iter()
            .all(|(name, shape, _)| params.get(name).is_some_and(|t| t.shape() == shape.as_slice()));
    if matches {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "parameters do not match a {kind} model with the given configuration"
        )))
    }
}

/// Batched forward pass of either model: `(α, β)`, each `[B×1]`.
pub fn forward_batch<'t, R: Rng + ?Sized>(
    kind: ModelKind,
    params: &BoundParams<'t>,
    cfg: &ModelConfig,
    samples: &[&CausalSample],
    training: bool,
    rng: &mut R,
) -> Result<(Var<'t>, Var<'t>)> {
    match kind {
        ModelKind::GnnTcnn => gnn_tcnn_forward_batch(samples, params, cfg, training, rng),
        ModelKind::LstmTcnn => lstm_tcnn_forward_batch(samples, params, cfg, training, rng),
    }
}

/// Evaluation-mode predictions for `samples`, in normalised time units.
pub fn predict(kind: ModelKind, params: &Parameters, cfg: &ModelConfig, samples: &[&CausalSample]) -> Result<Vec<GammaParams>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let mut unused = stream(0, &[]);
    let (alpha, beta) = forward_batch(kind, &bound, cfg, samples, false, &mut unused)?;
    let (a, b) = (alpha.value(), beta.value());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&a, &b)| GammaParams::new(a, b))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let cfg = ModelConfig {
            channels: 2,
            segment_len: 2556,
            aggregation: Aggregation::Max,
            time_scale: 1234.5,
            ..Default::default()
        };
        assert_eq!(ModelConfig::from_manifest(&cfg.manifest()).unwrap(), cfg);
        assert!(ModelConfig::from_manifest("bogus = 1").is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("gnn-tcnn".parse::<ModelKind>().unwrap(), ModelKind::GnnTcnn);
        assert_eq!("LSTM_TCNN".parse::<ModelKind>().unwrap(), ModelKind::LstmTcnn);
        assert!("mlp".parse::<ModelKind>().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::default();
        let a = init_params(ModelKind::GnnTcnn, &cfg, 1).unwrap();
        assert_eq!(a, init_params(ModelKind::GnnTcnn, &cfg, 1).unwrap());
        assert_ne!(a, init_params(ModelKind::GnnTcnn, &cfg, 2).unwrap());
        let w = a.get("core_edge.gate.w").unwrap();
        let bound = (1.0 / 45.0_f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        check_layout(ModelKind::GnnTcnn, &cfg, &a).unwrap();
        assert!(check_layout(ModelKind::LstmTcnn, &cfg, &a).is_err());
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            ModelConfig { latent: 0, ..Default::default() },
            ModelConfig { n_core: 0, ..Default::default() },
            ModelConfig { dropout: 1.0, ..Default::default() },
            ModelConfig { segment_len: 8, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
