//! Causal observation graphs built from experiments.
//!
//! A sample is anchored at one observation (the readout node, always the
//! latest) and contains up to `n_past − 1` earlier observations from a time
//! window before it, kept at least `min_spacing` apart. Every earlier
//! observation sends an edge to every later one, carrying the elapsed time.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::Experiment;
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::graphnet::{AttributedGraph, Connectivity};
use crate::rng::{label, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Look-back window before the anchor, in seconds.
    pub window: f64,
    /// Minimum gap between any two chosen observations, in seconds.
    pub min_spacing: f64,
    /// Past-observation counts, rotated per training epoch.
    pub schedule: Vec<usize>,
    /// Observation count used for evaluation.
    pub eval_past: usize,
    pub self_edges: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window: 2000.0,
            min_spacing: 100.0,
            schedule: vec![1, 2, 5, 10],
            eval_past: 30,
            self_edges: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_spacing > 0.0 && self.window > self.min_spacing && self.window.is_finite()) {
            return Err(Error::Config(format!(
                "sampler needs window > min_spacing > 0, got {} and {}",
                self.window, self.min_spacing
            )));
        }
        if self.schedule.is_empty() || self.schedule.contains(&0) {
            return Err(Error::Config("past-count schedule must be nonempty with entries ≥ 1".into()));
        }
        if self.eval_past == 0 {
            return Err(Error::Config("eval_past must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One training or evaluation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalSample {
    /// Nodes hold raw `[C×L]` segments (node attrs `[N×C×L]`); edges hold
    /// `Δt` in seconds (edge attrs `[E×1]`).
    pub graph: AttributedGraph,
    /// Node timestamps in seconds, increasing.
    pub timestamps: Vec<f64>,
    /// Index of the latest node, where the prediction is read out.
    pub readout: usize,
    /// Remaining useful life at the readout node, in seconds.
    pub target: f64,
    pub experiment: String,
    /// Observation index of the readout node within its experiment.
    pub anchor: usize,
}

impl CausalSample {
    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    /// Plain-text listing with timestamps and per-edge `Δt`.
    pub fn debug_dump(&self) -> String {
        let mut out = format!(
            "sample {}#{}: target {} s, readout node {}\n",
            self.experiment, self.anchor, self.target, self.readout
        );
        for (i, t) in self.timestamps.iter().enumerate() {
            out.push_str(&format!("t[{i}] = {t}\n"));
        }
        out.push_str(&self.graph.debug_dump());
        out
    }
}

/// Complete causal graph over observations at `times` (strictly increasing):
/// an edge `i → j` with `Δt = t_j − t_i` for every `i < j`, plus `i → i`
/// with `Δt = 0` when `self_edges` is set.
pub fn build_causal_graph(times: &[f64], segments: &[Tensor], self_edges: bool) -> Result<AttributedGraph> {
    if times.is_empty() || times.len() != segments.len() {
        return Err(Error::Dimension(format!(
            "{} timestamps for {} segments",
            times.len(),
            segments.len()
        )));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Precondition("causal graph timestamps must strictly increase".into()));
    }
    let n = times.len();
    let mut senders = Vec::with_capacity(n * (n - 1) / 2);
    let mut receivers = Vec::with_capacity(n * (n - 1) / 2);
    let mut dt = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        if self_edges {
            senders.push(i);
            receivers.push(i);
            dt.push(0.0);
        }
        for j in i + 1..n {
            senders.push(i);
            receivers.push(j);
            dt.push(times[j] - times[i]);
        }
    }
    let seg_shape = segments[0].shape().to_vec();
    let mut node_data = Vec::with_capacity(n * segments[0].numel());
    for s in segments {
        if s.shape() != seg_shape.as_slice() {
            return Err(Error::Dimension("segments differ in shape".into()));
        }
        node_data.extend_from_slice(s.data());
    }
    let mut node_shape = vec![n];
    node_shape.extend_from_slice(&seg_shape);
    let n_edges = dt.len();
    AttributedGraph::new(
        Connectivity::new(n, senders, receivers)?,
        Tensor::new(node_shape, node_data)?,
        Tensor::new(vec![n_edges, 1], dt)?,
    )
}

/// Past-observation count for `epoch`: the schedule, rotated.
pub fn epoch_past_count(epoch: usize, cfg: &SamplerConfig) -> usize {
    cfg.schedule[epoch % cfg.schedule.len()]
}

/// Observations usable as anchors (positive remaining life).
pub fn anchor_indices(exp: &Experiment) -> Vec<usize> {
    (0..exp.len()).filter(|&k| exp.rul(k) > 0.0).collect()
}

/// Sample anchored at observation `anchor` with up to `n_past − 1` earlier
/// observations chosen in random order, greedily rejecting any closer than
/// `min_spacing` to one already chosen.
pub fn sample_at<R: Rng + ?Sized>(
    exp: &Experiment,
    anchor: usize,
    cfg: &SamplerConfig,
    n_past: usize,
    rng: &mut R,
) -> Result<CausalSample> {
    let target = exp.rul(anchor);
    if !(target > 0.0) {
        return Err(Error::Precondition(format!(
            "{}: observation {anchor} is not before failure",
            exp.id
        )));
    }
    let t_last = exp.timestamps[anchor];
    let first = exp.timestamps[..anchor].partition_point(|&t| t < t_last - cfg.window);
    let mut candidates: Vec<usize> = (first..anchor).collect();
    candidates.shuffle(rng);

    let mut chosen = vec![anchor];
    for k in candidates {
        if chosen.len() >= n_past.max(1) {
            break;
        }
        let t = exp.timestamps[k];
        if chosen.iter().all(|&c| (exp.timestamps[c] - t).abs() >= cfg.min_spacing) {
            chosen.push(k);
        }
    }
    chosen.sort_unstable();

    let timestamps: Vec<f64> = chosen.iter().map(|&k| exp.timestamps[k]).collect();
    let segments: Vec<Tensor> = chosen.iter().map(|&k| exp.segments[k].clone()).collect();
    let graph = build_causal_graph(&timestamps, &segments, cfg.self_edges)?;
    Ok(CausalSample {
        graph,
        readout: timestamps.len() - 1,
        timestamps,
        target,
        experiment: exp.id.clone(),
        anchor,
    })
}

/// Training sample with a uniformly chosen anchor.
pub fn sample_training_graph<R: Rng + ?Sized>(
    exp: &Experiment,
    cfg: &SamplerConfig,
    n_past: usize,
    rng: &mut R,
) -> Result<CausalSample> {
    let anchors = anchor_indices(exp);
    if anchors.is_empty() {
        return Err(Error::Precondition(format!("{} has no pre-failure observation", exp.id)));
    }
    let anchor = anchors[rng.random_range(0..anchors.len())];
    sample_at(exp, anchor, cfg, n_past, rng)
}

/// One sample per pre-failure observation, in timestamp order, each drawn
/// from its own stream of `seed`.
pub fn eval_graphs(exp: &Experiment, cfg: &SamplerConfig, n_past: usize, seed: u64) -> Result<Vec<CausalSample>> {
    anchor_indices(exp)
        .into_iter()
        .map(|k| {
            let mut rng = stream(seed, &[label("eval"), label(&exp.id), k as u64]);
            sample_at(exp, k, cfg, n_past, &mut rng)
        })
        .collect()
}
