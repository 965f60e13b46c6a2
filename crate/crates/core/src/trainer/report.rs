use rayon::prelude::*;

use super::CHUNK;
use crate::dataset::Experiment;
use crate::error::Result;
use crate::gradcore::Parameters;
use crate::models::{predict, ModelConfig, ModelKind};
use crate::prob::GammaParams;
use crate::sampler::{eval_graphs, CausalSample, SamplerConfig};

/// Prediction at one anchor. Times are in seconds; `alpha`, `beta` and
/// `nll` refer to RUL in normalised units (seconds / time scale).
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub anchor: usize,
    pub timestamp: f64,
    pub n_nodes: usize,
    pub alpha: f64,
    pub beta: f64,
    pub mean: f64,
    pub std: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub true_rul: f64,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub id: String,
    pub n: usize,
    pub mean_nll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub experiments: Vec<ExperimentSummary>,
    /// Mean NLL over all rows.
    pub aggregate_nll: f64,
}

/// Builds report rows from per-sample predictions in normalised units.
pub fn report_from_predictions(samples: &[CausalSample], preds: &[GammaParams], time_scale: f64) -> Result<Report> {
    let mut rows = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(preds) {
        let stats = p.stats();
        rows.push(ReportRow {
            experiment: s.experiment.clone(),
            anchor: s.anchor,
            timestamp: s.timestamps[s.readout],
            n_nodes: s.n_nodes(),
            alpha: p.alpha,
            beta: p.beta,
            mean: stats.mean * time_scale,
            std: p.std_dev() * time_scale,
            q05: p.quantile(0.05)? * time_scale,
            q50: p.quantile(0.5)? * time_scale,
            q95: p.quantile(0.95)? * time_scale,
            true_rul: s.target,
            nll: -p.log_pdf(s.target / time_scale)?,
        });
    }
    let mut experiments: Vec<ExperimentSummary> = Vec::new();
    for r in &rows {
        match experiments.last_mut() {
            Some(e) if e.id == r.experiment => {
                e.n += 1;
                e.mean_nll += r.nll;
            }
            _ => experiments.push(ExperimentSummary {
                id: r.experiment.clone(),
                n: 1,
                mean_nll: r.nll,
            }),
        }
    }
    for e in &mut experiments {
        e.mean_nll /= e.n as f64;
    }
    let aggregate_nll = if rows.is_empty() {
        f64::NAN
    } else {
        rows.iter().map(|r| r.nll).sum::<f64>() / rows.len() as f64
    };
    Ok(Report {
        rows,
        experiments,
        aggregate_nll,
    })
}

/// Predictions at every pre-failure observation of every experiment, with up
/// to `n_past` observations per sample.
pub fn evaluate(
    kind: ModelKind,
    params: &Parameters,
    model_cfg: &ModelConfig,
    experiments: &[Experiment],
    sampler_cfg: &SamplerConfig,
    n_past: usize,
    seed: u64,
) -> Result<Report> {
    let mut samples = Vec::new();
    for exp in experiments {
        samples.extend(eval_graphs(exp, sampler_cfg, n_past, seed)?);
    }
    let refs: Vec<&CausalSample> = samples.iter().collect();
    let preds = refs
        .par_chunks(CHUNK)
        .map(|chunk| predict(kind, params, model_cfg, chunk))
        .collect::<Result<Vec<_>>>()?
        .concat();
    report_from_predictions(&samples, &preds, model_cfg.time_scale)
}
