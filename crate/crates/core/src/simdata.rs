//! Synthetic run-to-failure data from a non-stationary Gamma-increment process.
//!
//! Latent damage accumulates as `z_k = Σ_{i≤k} δη_i` with
//! `δη_i ~ Gamma(0.02 + t_i^c, β)` on the normalised grid `t_i = (i+1)/N_t`,
//! and the experiment fails at the first step where `z ≥ z_f`. Each
//! observation is a noisy segment whose spike amplitudes grow with `z`.

use log::{debug, warn};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{Dataset, Experiment};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::prob::GammaParams;
use crate::rng::{label, stream};

/// Parameters of the simulated process. `z_f` and `sigma_z` default to a
/// calibrated threshold and `0.02·z_f` when left unset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimProcessConfig {
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
    /// Wall-clock duration of one step, in seconds.
    pub step_seconds: f64,
    pub pilot_runs: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SimProcessConfig {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            beta: 50.0,
            z_f: None,
            mu_c: 1.0,
            sigma_c: 0.15,
            sigma_z: None,
            sigma_x: 0.1,
            segment_len: 1000,
            n_spikes: 20,
            a0: 0.5,
            a1: 2.0,
            step_seconds: 10.0,
            pilot_runs: 500,
            n_train: 12,
            n_test: 3,
            seed: 0,
        }
    }
}

impl SimProcessConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_steps == 0 || self.segment_len == 0 || self.pilot_runs == 0 {
            return bad("n_steps, segment_len and pilot_runs must be ≥ 1".into());
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if let Some(z) = self.z_f {
            if !(z > 0.0 && z.is_finite()) {
                return bad(format!("z_f must be positive, got {z}"));
            }
        }
        let stds = [self.sigma_c, self.sigma_x, self.sigma_z.unwrap_or(0.0)];
        if stds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("standard deviations must be finite and ≥ 0".into());
        }
        if !self.mu_c.is_finite() || !self.a0.is_finite() || !self.a1.is_finite() {
            return bad("mu_c, a0 and a1 must be finite".into());
        }
        if self.n_spikes > self.segment_len {
            return bad(format!("{} spikes do not fit {} samples", self.n_spikes, self.segment_len));
        }
        if !(self.step_seconds > 0.0 && self.step_seconds.is_finite()) {
            return bad("step_seconds must be positive".into());
        }
        if self.n_train + self.n_test == 0 {
            return bad("at least one experiment is required".into());
        }
        Ok(())
    }

    /// Nominal horizon `N_t · step_seconds`, used as the time scale.
    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.step_seconds
    }

    /// The configured failure threshold, or the calibrated one.
    pub fn threshold(&self) -> Result<f64> {
        match self.z_f {
            Some(z) => Ok(z),
            None => calibrate_threshold(self),
        }
    }

    fn latent_noise(&self, z_f: f64) -> f64 {
        self.sigma_z.unwrap_or(0.02 * z_f)
    }
}

/// Shape of the increment at normalised time `t`: `0.02 + t^c`.
pub fn increment_shape(t: f64, c: f64) -> f64 {
    0.02 + t.powf(c)
}

/// One increment `δη ~ Gamma(0.02 + t^c, β)`.
pub fn draw_increment<R: Rng + ?Sized>(t: f64, c: f64, beta: f64, rng: &mut R) -> Result<f64> {
    Ok(GammaParams::new(increment_shape(t, c), beta)?.sample(rng))
}

/// Latent damage path up to and including the failure step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    pub z: Vec<f64>,
    pub failure_step: usize,
}

/// Cumulative increments until `z ≥ z_f`. `None` when the threshold is not
/// reached within `n_steps`.
pub fn simulate_latent<R: Rng + ?Sized>(
    cfg: &SimProcessConfig,
    z_f: f64,
    c: f64,
    rng: &mut R,
) -> Result<Option<LatentPath>> {
    if !c.is_finite() {
        return Err(Error::Precondition(format!("exponent c must be finite, got {c}")));
    }
    let n = cfg.n_steps as f64;
    let mut z = 0.0;
    let mut path = Vec::new();
    for i in 0..cfg.n_steps {
        z += draw_increment((i + 1) as f64 / n, c, cfg.beta, rng)?;
        path.push(z);
        if z >= z_f {
            return Ok(Some(LatentPath {
                z: path,
                failure_step: i,
            }));
        }
    }
    Ok(None)
}

/// Raw observation for latent value `z_obs`: Gaussian noise plus `K` spikes
/// at distinct positions with amplitude `±(a0 + a1·z_obs²)`.
pub fn emit_segment<R: Rng + ?Sized>(z_obs: f64, cfg: &SimProcessConfig, rng: &mut R) -> Result<Tensor> {
    let len = cfg.segment_len;
    let mut x = vec![0.0; len];
    if cfg.sigma_x > 0.0 {
        let noise = Normal::new(0.0, cfg.sigma_x).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut x {
            *v = noise.sample(rng);
        }
    }
    let amplitude = cfg.a0 + cfg.a1 * z_obs * z_obs;
    for pos in sample_indices(rng, len, cfg.n_spikes.min(len)) {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        x[pos] += sign * amplitude;
    }
    Tensor::new(vec![1, len], x)
}

fn draw_exponent<R: Rng + ?Sized>(cfg: &SimProcessConfig, rng: &mut R) -> Result<f64> {
    if cfg.sigma_c == 0.0 {
        return Ok(cfg.mu_c);
    }
    let dist = Normal::new(cfg.mu_c, cfg.sigma_c).map_err(|e| Error::Config(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Threshold placing the median failure step near `0.55·N_t`: the median,
/// over pilot runs with the configured exponent distribution, of the latent
/// value reached at that step.
pub fn calibrate_threshold(cfg: &SimProcessConfig) -> Result<f64> {
    let target = ((0.55 * cfg.n_steps as f64).round() as usize).clamp(1, cfg.n_steps);
    let n = cfg.n_steps as f64;
    let mut values = (0..cfg.pilot_runs)
        .map(|run| {
            let mut rng = stream(cfg.seed, &[label("pilot"), run as u64]);
            let c = draw_exponent(cfg, &mut rng)?;
            let mut z = 0.0;
            for i in 0..target {
                z += draw_increment((i + 1) as f64 / n, c, cfg.beta, &mut rng)?;
            }
            Ok(z)
        })
        .collect::<Result<Vec<f64>>>()?;
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    let median = if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    };
    debug!("calibrated failure threshold {median:.6} from {} pilot runs", cfg.pilot_runs);
    Ok(median)
}

const MAX_ATTEMPTS: u64 = 1000;

/// One experiment with index `index`, regenerated until the latent path
/// reaches the threshold. Observations cover every pre-failure step.
pub fn simulate_experiment(cfg: &SimProcessConfig, z_f: f64, index: usize, train: bool) -> Result<Experiment> {
    let sigma_z = cfg.latent_noise(z_f);
    let eps = Normal::new(0.0, sigma_z).map_err(|e| Error::Config(e.to_string()))?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = stream(cfg.seed, &[label("experiment"), index as u64, attempt]);
        let c = draw_exponent(cfg, &mut rng)?;
        let Some(path) = simulate_latent(cfg, z_f, c, &mut rng)? else {
            warn!("experiment {index}: threshold not reached within {} steps (c = {c:.4}), regenerating", cfg.n_steps);
            continue;
        };
        if path.failure_step == 0 {
            warn!("experiment {index}: failed at the first step, regenerating");
            continue;
        }
        let n_obs = path.failure_step;
        let mut segments = Vec::with_capacity(n_obs);
        for &z in &path.z[..n_obs] {
            let z_obs = z + if sigma_z > 0.0 { eps.sample(&mut rng) } else { 0.0 };
            segments.push(emit_segment(z_obs, cfg, &mut rng)?);
        }
        let timestamps = (0..n_obs).map(|k| (k + 1) as f64 * cfg.step_seconds).collect();
        let failure_time = (path.failure_step + 1) as f64 * cfg.step_seconds;
        let mut latent = path.z;
        latent.truncate(n_obs);
        return Experiment::new(
            format!("sim{index:03}"),
            if train { "train" } else { "test" },
            timestamps,
            segments,
            failure_time,
            Some(latent),
        );
    }
    Err(Error::Precondition(format!(
        "experiment {index}: no run reached the threshold in {MAX_ATTEMPTS} attempts"
    )))
}

/// `n_train + n_test` experiments generated in parallel with independent
/// per-experiment streams.
pub fn generate_dataset(cfg: &SimProcessConfig) -> Result<Dataset> {
    cfg.validate()?;
    let z_f = cfg.threshold()?;
    let total = cfg.n_train + cfg.n_test;
    let experiments = (0..total)
        .into_par_iter()
        .map(|i| simulate_experiment(cfg, z_f, i, i < cfg.n_train))
        .collect::<Result<Vec<_>>>()?;
    let mut train = experiments;
    let test = train.split_off(cfg.n_train);
    Ok(Dataset {
        kind: "simulated".into(),
        time_scale: cfg.horizon(),
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimProcessConfig {
        SimProcessConfig {
            n_steps: 200,
            segment_len: 64,
            n_spikes: 5,
            pilot_runs: 100,
            n_train: 3,
            n_test: 1,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn quiet_segment_is_zero() {
        let cfg = SimProcessConfig {
            sigma_x: 0.0,
            n_spikes: 0,
            ..small()
        };
        let seg = emit_segment(3.0, &cfg, &mut stream(1, &[])).unwrap();
        assert!(seg.data().iter().all(|&v| v == 0.0));
        assert_eq!(seg.shape(), &[1, 64]);
    }

    #[test]
    fn spikes_at_zero_latent_have_base_amplitude() {
        let cfg = SimProcessConfig {
            sigma_x: 0.0,
            ..small()
        };
        let seg = emit_segment(0.0, &cfg, &mut stream(2, &[])).unwrap();
        let spikes: Vec<f64> = seg.data().iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(spikes.len(), 5);
        assert!(spikes.iter().all(|v| (v.abs() - cfg.a0).abs() < 1e-15));
    }

    #[test]
    fn latent_path_is_monotone_and_crosses_once() {
        let cfg = small();
        let z_f = cfg.threshold().unwrap();
        for run in 0..20 {
            let mut rng = stream(3, &[run]);
            let path = simulate_latent(&cfg, z_f, 1.0, &mut rng).unwrap().unwrap();
            assert!(path.z.windows(2).all(|w| w[1] >= w[0]));
            assert_eq!(path.z.iter().filter(|&&z| z >= z_f).count(), 1);
            assert_eq!(path.z.len(), path.failure_step + 1);
        }
    }

    #[test]
    fn unreachable_threshold_gives_none() {
        let cfg = small();
        assert!(simulate_latent(&cfg, 1e9, 1.0, &mut stream(4, &[])).unwrap().is_none());
        assert!(simulate_latent(&cfg, 1.0, f64::NAN, &mut stream(4, &[])).is_err());
    }

    #[test]
    fn calibrated_median_failure_in_band() {
        let cfg = small();
        let z_f = cfg.threshold().unwrap();
        let mut steps: Vec<usize> = (0..200)
            .map(|run| {
                let mut rng = stream(5, &[run]);
                let c = draw_exponent(&cfg, &mut rng).unwrap();
                simulate_latent(&cfg, z_f, c, &mut rng)
                    .unwrap()
                    .map_or(cfg.n_steps, |p| p.failure_step)
            })
            .collect();
        steps.sort();
        let median = steps[100] as f64 / cfg.n_steps as f64;
        assert!((0.3..=0.8).contains(&median), "median failure fraction {median}");
    }

    #[test]
    fn dataset_has_requested_split_and_positive_rul() {
        let ds = generate_dataset(&small()).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (3, 1));
        assert_eq!(ds.time_scale, 2000.0);
        for exp in ds.train.iter().chain(&ds.test) {
            assert!((0..exp.len()).all(|k| exp.rul(k) > 0.0));
            let z = exp.latent.as_ref().unwrap();
            assert!(z.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SimProcessConfig { beta: 0.0, ..small() },
            SimProcessConfig { z_f: Some(-1.0), ..small() },
            SimProcessConfig { sigma_x: -0.1, ..small() },
            SimProcessConfig { n_spikes: 65, ..small() },
            SimProcessConfig { segment_len: 0, ..small() },
        ] {
            assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        }
    }
}
