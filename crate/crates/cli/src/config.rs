//! Run configuration read from a TOML file. Every key has a default, so an
//! empty file (or no file) is a valid configuration.

use std::fs;
use std::path::Path;

use causal_rul::bearings::FemtoOptions;
use causal_rul::graphnet::Aggregation;
use causal_rul::models::ModelConfig;
use causal_rul::sampler::SamplerConfig;
use causal_rul::simdata::SimProcessConfig;
use causal_rul::trainer::TrainConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub simulation: SimulationSection,
    pub sampler: SamplerSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub femto: FemtoSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub n_steps: usize,
    pub beta: f64,
    pub z_f: Option<f64>,
    pub mu_c: f64,
    pub sigma_c: f64,
    pub sigma_z: Option<f64>,
    pub sigma_x: f64,
    pub segment_len: usize,
    pub n_spikes: usize,
    pub a0: f64,
    pub a1: f64,
    pub step_seconds: f64,
    pub pilot_runs: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let d = SimProcessConfig::default();
        Self {
            n_steps: d.n_steps,
            beta: d.beta,
            z_f: d.z_f,
            mu_c: d.mu_c,
            sigma_c: d.sigma_c,
            sigma_z: d.sigma_z,
            sigma_x: d.sigma_x,
            segment_len: d.segment_len,
            n_spikes: d.n_spikes,
            a0: d.a0,
            a1: d.a1,
            step_seconds: d.step_seconds,
            pilot_runs: d.pilot_runs,
            n_train: d.n_train,
            n_test: d.n_test,
            seed: d.seed,
        }
    }
}

impl SimulationSection {
    pub fn to_core(&self) -> SimProcessConfig {
        SimProcessConfig {
            n_steps: self.n_steps,
            beta: self.beta,
            z_f: self.z_f,
            mu_c: self.mu_c,
            sigma_c: self.sigma_c,
            sigma_z: self.sigma_z,
            sigma_x: self.sigma_x,
            segment_len: self.segment_len,
            n_spikes: self.n_spikes,
            a0: self.a0,
            a1: self.a1,
            step_seconds: self.step_seconds,
            pilot_runs: self.pilot_runs,
            n_train: self.n_train,
            n_test: self.n_test,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub window: f64,
    pub min_spacing: f64,
    pub schedule: Vec<usize>,
    pub eval_past: usize,
    pub self_edges: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            window: d.window,
            min_spacing: d.min_spacing,
            schedule: d.schedule,
            eval_past: d.eval_past,
            self_edges: d.self_edges,
        }
    }
}

impl SamplerSection {
    pub fn to_core(&self) -> SamplerConfig {
        SamplerConfig {
            window: self.window,
            min_spacing: self.min_spacing,
            schedule: self.schedule.clone(),
            eval_past: self.eval_past,
            self_edges: self.self_edges,
        }
    }
}

/// Architecture settings. Channel count, segment length and time scale come
/// from the dataset.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent: usize,
    pub hidden: usize,
    pub n_core: usize,
    pub dropout: f64,
    pub aggregation: String,
    pub lstm_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            latent: d.latent,
            hidden: d.hidden,
            n_core: d.n_core,
            dropout: d.dropout,
            aggregation: "mean".into(),
            lstm_hidden: d.lstm_hidden,
        }
    }
}

impl ModelSection {
    pub fn to_core(&self, channels: usize, segment_len: usize, time_scale: f64) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            latent: self.latent,
            hidden: self.hidden,
            n_core: self.n_core,
            channels,
            segment_len,
            dropout: self.dropout,
            time_scale,
            aggregation: self.aggregation.parse::<Aggregation>()?,
            lstm_hidden: self.lstm_hidden,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub burn_in: usize,
    pub decay: f64,
    pub decay_start: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub batch_size: usize,
    pub samples_per_experiment: usize,
    pub clip: bool,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lr: d.lr,
            burn_in: d.burn_in,
            decay: d.decay,
            decay_start: d.decay_start,
            max_epochs: d.max_epochs,
            patience: d.patience,
            val_fraction: d.val_fraction,
            batch_size: d.batch_size,
            samples_per_experiment: d.samples_per_experiment,
            clip: d.clip_norm.is_some(),
            clip_norm: d.clip_norm.unwrap_or(10.0),
            seed: d.seed,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            burn_in: self.burn_in,
            decay: self.decay,
            decay_start: self.decay_start,
            max_epochs: self.max_epochs,
            patience: self.patience,
            val_fraction: self.val_fraction,
            batch_size: self.batch_size,
            samples_per_experiment: self.samples_per_experiment,
            clip_norm: self.clip.then_some(self.clip_norm),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FemtoSection {
    pub spacing: f64,
    pub use_file_clock: bool,
    pub strict: bool,
    pub count_tolerance: usize,
}

impl Default for FemtoSection {
    fn default() -> Self {
        let d = FemtoOptions::default();
        Self {
            spacing: d.spacing,
            use_file_clock: d.use_file_clock,
            strict: d.strict,
            count_tolerance: d.count_tolerance,
        }
    }
}

impl FemtoSection {
    pub fn to_core(&self) -> FemtoOptions {
        FemtoOptions {
            spacing: self.spacing,
            use_file_clock: self.use_file_clock,
            strict: self.strict,
            count_tolerance: self.count_tolerance,
        }
    }
}
