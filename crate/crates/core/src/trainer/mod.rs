//! Training loop and evaluation reports.

mod adam;
mod report;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use adam::{adam_step, clip_grad_norm, grad_norm, AdamState, BETA1, BETA2, EPSILON};
pub use report::{evaluate, report_from_predictions, ExperimentSummary, Report, ReportRow};

use crate::dataset::{Dataset, Experiment};
use crate::error::{Error, Result};
use crate::gradcore::{Parameters, Tape};
use crate::models::{forward_batch, init_params, predict, ModelConfig, ModelKind};
use crate::prob::{nll, nll_loss};
use crate::rng::{label, stream};
use crate::sampler::{epoch_past_count, sample_training_graph, CausalSample, SamplerConfig};

/// Samples recorded on one tape. Fixed so that results do not depend on the
/// number of worker threads.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub burn_in: usize,
    pub decay: f64,
    pub decay_start: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub batch_size: usize,
    pub samples_per_experiment: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            burn_in: 10,
            decay: 0.99,
            decay_start: 40,
            max_epochs: 300,
            patience: 50,
            val_fraction: 0.2,
            batch_size: 32,
            samples_per_experiment: 64,
            clip_norm: Some(10.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("validation fraction must lie in (0, 1)");
        }
        if self.patience == 0 || self.batch_size == 0 || self.samples_per_experiment == 0 || self.max_epochs == 0 {
            return bad("patience, batch size, samples per experiment and max epochs must be ≥ 1");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay factor must lie in (0, 1]");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: linear ramp `base·(e+1)/burn_in` during
/// burn-in, then constant, then `base·decay^(e − decay_start)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.burn_in {
        cfg.lr * (epoch + 1) as f64 / cfg.burn_in as f64
    } else if epoch <= cfg.decay_start {
        cfg.lr
    } else {
        cfg.lr * cfg.decay.powi((epoch - cfg.decay_start) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub val_nll: f64,
    pub n_past: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    /// A loss or gradient became non-finite; the best parameters so far are kept.
    NonFinite(String),
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Parameters with the lowest validation NLL.
    pub params: Parameters,
    pub history: Vec<HistoryRow>,
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
}

fn add_into(acc: &mut Parameters, other: &Parameters) {
    for (name, t) in acc.iter_mut() {
        let o = other.get(name).expect("same layout");
        t.data_mut().iter_mut().zip(o.data()).for_each(|(a, b)| *a += b);
    }
}

fn scale_by(p: &mut Parameters, s: f64) {
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

fn targets(samples: &[&CausalSample], time_scale: f64) -> Vec<f64> {
    samples.iter().map(|s| s.target / time_scale).collect()
}

/// Summed NLL and its gradient over `batch`, in training mode. Dropout masks
/// come from streams keyed by `key` and the chunk index.
pub fn batch_gradient(
    kind: ModelKind,
    params: &Parameters,
    cfg: &ModelConfig,
    batch: &[&CausalSample],
    seed: u64,
    key: &[u64],
) -> Result<(f64, Parameters)> {
    let parts = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut path = key.to_vec();
            path.push(c as u64);
            let mut rng = stream(seed, &path);
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let (alpha, beta) = forward_batch(kind, &bound, cfg, chunk, true, &mut rng)?;
            let loss = nll_loss(alpha, beta, &targets(chunk, cfg.time_scale))?;
            let value = loss.item()?;
            let grads = tape.backward(loss)?;
            Ok((value, bound.gradients(&grads)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parts = parts.into_iter();
    let (mut total, mut grads) = parts.next().ok_or_else(|| Error::Precondition("empty batch".into()))?;
    for (v, g) in parts {
        total += v;
        add_into(&mut grads, &g);
    }
    Ok((total, grads))
}

/// Mean NLL of `samples` in evaluation mode.
pub fn mean_nll(kind: ModelKind, params: &Parameters, cfg: &ModelConfig, samples: &[&CausalSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples to score".into()));
    }
    let sums = samples
        .par_chunks(CHUNK)
        .map(|chunk| nll(&predict(kind, params, cfg, chunk)?, &targets(chunk, cfg.time_scale)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / samples.len() as f64)
}

/// Held-out graphs drawn once before training. Their past-observation
/// counts cycle through the schedule so that validation NLL is comparable
/// across epochs.
fn validation_pool(
    experiments: &[Experiment],
    sampler: &SamplerConfig,
    per_experiment: usize,
    seed: u64,
) -> Result<Vec<CausalSample>> {
    let k = sampler.schedule.len();
    let nested = experiments
        .par_iter()
        .enumerate()
        .map(|(i, exp)| {
            let mut rng = stream(seed, &[label("validation"), i as u64]);
            (0..per_experiment)
                .map(|j| sample_training_graph(exp, sampler, sampler.schedule[(i + j) % k], &mut rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}

fn epoch_samples(
    experiments: &[Experiment],
    sampler: &SamplerConfig,
    n_past: usize,
    per_experiment: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<CausalSample>> {
    let nested = experiments
        .par_iter()
        .enumerate()
        .map(|(i, exp)| {
            let mut rng = stream(seed, &[label("sample"), epoch as u64, i as u64]);
            (0..per_experiment)
                .map(|_| sample_training_graph(exp, sampler, n_past, &mut rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Domain(_))
}

/// Trains `kind` on `dataset.train` from fresh parameters seeded by
/// `train_cfg.seed`.
pub fn train(
    kind: ModelKind,
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    sampler_cfg: &SamplerConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainRun> {
    let params = init_params(kind, model_cfg, train_cfg.seed)?;
    train_from(kind, params, &dataset.train, model_cfg, sampler_cfg, train_cfg)
}

/// Trains starting from `params`.
pub fn train_from(
    kind: ModelKind,
    mut params: Parameters,
    experiments: &[Experiment],
    model_cfg: &ModelConfig,
    sampler_cfg: &SamplerConfig,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    model_cfg.validate()?;
    sampler_cfg.validate()?;
    cfg.validate()?;
    if experiments.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if cfg.samples_per_experiment < 2 {
        return Err(Error::Precondition("need at least two samples per experiment for a validation split".into()));
    }
    let n_val = ((cfg.val_fraction * cfg.samples_per_experiment as f64).round() as usize)
        .clamp(1, cfg.samples_per_experiment - 1);
    let n_fit = cfg.samples_per_experiment - n_val;
    let mut state = AdamState::new(&params);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::new();
    let val_pool = match validation_pool(experiments, sampler_cfg, n_val, cfg.seed) {
        Ok(v) => v,
        Err(e) if is_numeric(&e) => return Ok(aborted(best, history, best_epoch, e.to_string())),
        Err(e) => return Err(e),
    };
    let val: Vec<&CausalSample> = val_pool.iter().collect();

    for epoch in 0..cfg.max_epochs {
        let n_past = epoch_past_count(epoch, sampler_cfg);
        let lr = lr_at(epoch, cfg);
        let mut samples = match epoch_samples(experiments, sampler_cfg, n_past, n_fit, cfg.seed, epoch) {
            Ok(s) => s,
            Err(e) if is_numeric(&e) => return Ok(aborted(best, history, best_epoch, e.to_string())),
            Err(e) => return Err(e),
        };
        samples.shuffle(&mut stream(cfg.seed, &[label("shuffle"), epoch as u64]));
        let fit: Vec<&CausalSample> = samples.iter().collect();

        let mut train_sum = 0.0;
        let step = (|| -> Result<()> {
            for (b, batch) in fit.chunks(cfg.batch_size).enumerate() {
                let (loss, mut grads) =
                    batch_gradient(kind, &params, model_cfg, batch, cfg.seed, &[label("dropout"), epoch as u64, b as u64])?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                train_sum += loss;
                scale_by(&mut grads, 1.0 / batch.len() as f64);
                if let Some(max) = cfg.clip_norm {
                    clip_grad_norm(&mut grads, max);
                }
                adam_step(&mut params, &grads, &mut state, lr)?;
            }
            Ok(())
        })();
        let val_nll = step.and_then(|()| mean_nll(kind, &params, model_cfg, &val));
        let val_nll = match val_nll {
            Ok(v) if v.is_finite() => v,
            Ok(_) => return Ok(aborted(best, history, best_epoch, "validation NLL is not finite".into())),
            Err(e) if is_numeric(&e) => return Ok(aborted(best, history, best_epoch, e.to_string())),
            Err(e) => return Err(e),
        };
        let train_nll = train_sum / fit.len() as f64;
        info!("epoch {epoch:>3}  lr {lr:.3e}  n_past {n_past:>2}  train {train_nll:.5}  val {val_nll:.5}");
        history.push(HistoryRow {
            epoch,
            lr,
            train_nll,
            val_nll,
            n_past,
        });
        if val_nll < best_val {
            best_val = val_nll;
            best = params.clone();
            best_epoch = Some(epoch);
        } else if best_epoch.is_some_and(|b| epoch - b >= cfg.patience) {
            info!("early stop at epoch {epoch}: no improvement for {} epochs", cfg.patience);
            return Ok(TrainRun {
                params: best,
                history,
                best_epoch,
                stop: StopReason::EarlyStopped,
            });
        }
    }
    Ok(TrainRun {
        params: best,
        history,
        best_epoch,
        stop: StopReason::MaxEpochs,
    })
}

fn aborted(best: Parameters, history: Vec<HistoryRow>, best_epoch: Option<usize>, why: String) -> TrainRun {
    warn!("training aborted: {why}");
    TrainRun {
        params: best,
        history,
        best_epoch,
        stop: StopReason::NonFinite(why),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert!((lr_at(0, &cfg) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at(9, &cfg), 1e-3);
        assert_eq!(lr_at(10, &cfg), 1e-3);
        assert_eq!(lr_at(20, &cfg), 1e-3);
        assert_eq!(lr_at(40, &cfg), 1e-3);
        let want = 1e-3 * 0.99f64.powi(10);
        assert!((lr_at(50, &cfg) - want).abs() < 1e-15);
        assert!((lr_at(50, &cfg) - 0.000904).abs() < 5e-7);
    }

    #[test]
    fn schedule_is_monotone_in_each_phase() {
        let cfg = TrainConfig::default();
        for e in 0..9 {
            assert!(lr_at(e + 1, &cfg) > lr_at(e, &cfg));
        }
        for e in 41..299 {
            assert!(lr_at(e + 1, &cfg) < lr_at(e, &cfg));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { val_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { clip_norm: Some(-1.0), ..Default::default() }.validate().is_err());
    }
}
