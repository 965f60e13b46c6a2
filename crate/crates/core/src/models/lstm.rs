use rand::Rng;

use super::layers::{decode_gamma, tcnn_encode};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::gradcore::{BoundParams, Tensor, Var};
use crate::sampler::CausalSample;

/// LSTM-tCNN on a batch of samples: `(α, β)`, each `[B×1]`.
///
/// Each sample's observations are read in time order. Every segment is
/// encoded by the shared tCNN, the encoding is extended with `Δt/τ` since the
/// previous observation (zero for the first), and the sequence drives one
/// LSTM cell. The final hidden state feeds the Gamma heads.
pub fn lstm_tcnn_forward_batch<'t, R: Rng + ?Sized>(
    samples: &[&CausalSample],
    p: &BoundParams<'t>,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<(Var<'t>, Var<'t>)> {
    if samples.is_empty() {
        return Err(Error::Precondition("forward pass needs at least one sample".into()));
    }
    let tape = p.tape();
    let mut segments = Vec::new();
    let mut steps = Vec::with_capacity(samples.len());
    for s in samples {
        let t = &s.timestamps;
        if t.windows(2).any(|w| w[1] <= w[0]) || s.readout + 1 != t.len() {
            return Err(Error::Precondition(format!(
                "{}#{}: observations must be in increasing time order ending at the readout",
                s.experiment, s.anchor
            )));
        }
        segments.push(s.graph.node_attrs.clone());
        steps.push(t.len());
    }
    let nodes = tape.constant(Tensor::concat_rows(&segments)?);
    let encoded = tcnn_encode(nodes, p, cfg, training, rng)?;

    let h_dim = cfg.lstm_hidden;
    let (wx, bx) = (p.get("lstm.x.w")?, p.get("lstm.x.b")?);
    let wh = p.get("lstm.h.w")?;
    let mut finals = Vec::with_capacity(samples.len());
    let mut offset = 0;
    for (s, &n) in samples.iter().zip(&steps) {
        let mut h = tape.constant(Tensor::zeros(vec![1, h_dim]));
        let mut c = tape.constant(Tensor::zeros(vec![1, h_dim]));
        for k in 0..n {
            let dt = if k == 0 { 0.0 } else { s.timestamps[k] - s.timestamps[k - 1] };
            let dt = tape.constant(Tensor::new(vec![1, 1], vec![dt / cfg.time_scale])?);
            let x = Var::concat(&[encoded.slice(0, offset + k..offset + k + 1)?, dt], 1)?;
            let z = x.matmul(wx)?.add(bx)?.add(h.matmul(wh)?)?;
            let gate = |i: usize| z.slice(1, i * h_dim..(i + 1) * h_dim);
            let (i_g, f_g, g_c, o_g) = (gate(0)?.sigmoid()?, gate(1)?.sigmoid()?, gate(2)?.tanh()?, gate(3)?.sigmoid()?);
            c = f_g.mul(c)?.add(i_g.mul(g_c)?)?;
            h = o_g.mul(c.tanh()?)?;
        }
        finals.push(h);
        offset += n;
    }
    decode_gamma(Var::concat(&finals, 0)?, p)
}

/// Single-sample LSTM-tCNN forward pass: `(α, β)`, each `[1×1]`.
pub fn lstm_tcnn_forward<'t, R: Rng + ?Sized>(
    sample: &CausalSample,
    p: &BoundParams<'t>,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<(Var<'t>, Var<'t>)> {
    lstm_tcnn_forward_batch(&[sample], p, cfg, training, rng)
}
