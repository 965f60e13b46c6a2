use rand::Rng;

use super::{ModelConfig, MIN_SEGMENT_LEN};
use crate::error::{Error, Result};
use crate::gradcore::{BoundParams, Var};

/// Offset keeping both Gamma parameters away from zero.
pub const EPS0: f64 = 1e-6;

/// `(filters, kernel)` of the four convolutions in each tCNN stack.
pub(super) const TCNN_STACK: [(usize, usize); 4] = [(50, 1), (18, 3), (18, 3), (50, 3)];

/// `x·W + b` for parameters `{name}.w` (`[in×out]`) and `{name}.b`.
pub(crate) fn dense<'t>(p: &BoundParams<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.matmul(p.get(&format!("{name}.w"))?)?.add(p.get(&format!("{name}.b"))?)
}

/// Signal length after each pooling stage of the encoder, for input length `len`.
pub fn tcnn_output_len(len: usize) -> [usize; 3] {
    let conv = |l: usize, k: usize, s: usize, pad: usize| (l + 2 * pad - k) / s + 1;
    let mut out = [0; 3];
    let mut l = len;
    for slot in &mut out {
        l = conv(conv(conv(l, 3, 2, 1), 3, 2, 1), 3, 2, 1);
        *slot = l;
        l = (l - 2.min(l)) / 2 + 1;
    }
    out
}

/// Temporal CNN node encoder: `[C×L] → [d]` or `[B×C×L] → [B×d]`.
///
/// Three stacks of conv(k1) → conv(k3,s2) → conv(k3,s2) → dropout + ReLU →
/// conv(k3,s2) → avg-pool(2,2), the last ending in global average pooling,
/// then a dense layer to `d` with leaky ReLU. Kernel-3 layers pad by one.
/// The pool window shrinks to the signal length when fewer than two samples
/// remain.
pub fn tcnn_encode<'t, R: Rng + ?Sized>(
    x: Var<'t>,
    p: &BoundParams<'t>,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let (single, c, l) = match shape[..] {
        [c, l] => (true, c, l),
        [_, c, l] => (false, c, l),
        _ => return Err(Error::Dimension(format!("tCNN input must be [C×L] or [B×C×L], got {shape:?}"))),
    };
    if c != cfg.channels {
        return Err(Error::Dimension(format!("tCNN expects {} channels, got {c}", cfg.channels)));
    }
    if l < MIN_SEGMENT_LEN {
        return Err(Error::Dimension(format!("segment length {l} below the minimum {MIN_SEGMENT_LEN}")));
    }
    let mut h = if single { x.reshape(vec![1, c, l])? } else { x };
    for stack in 0..3 {
        let conv = |h: Var<'t>, i: usize, stride: usize, pad: usize| -> Result<Var<'t>> {
            let name = format!("tcnn.s{stack}.c{i}");
            h.conv1d(p.get(&format!("{name}.w"))?, Some(p.get(&format!("{name}.b"))?), stride, pad)
        };
        h = conv(h, 1, 1, 0)?;
        h = conv(h, 2, 2, 1)?;
        h = conv(h, 3, 2, 1)?;
        h = h.dropout(cfg.dropout, training, rng)?.relu()?;
        h = conv(h, 4, 2, 1)?;
        h = if stack < 2 {
            let len = *h.shape().last().expect("rank 3");
            h.avg_pool1d(2.min(len), 2)?
        } else {
            h.global_avg_pool()?
        };
    }
    let out = dense(p, "tcnn.dense", h)?.leaky_relu()?;
    if single {
        out.reshape(vec![cfg.latent])
    } else {
        Ok(out)
    }
}

/// Edge encoder on elapsed times in seconds, `[E×1] → [E×d]`.
pub fn edge_encode<'t>(dt_seconds: Var<'t>, p: &BoundParams<'t>, cfg: &ModelConfig) -> Result<Var<'t>> {
    if dt_seconds.value().data().iter().any(|&dt| dt < 0.0) {
        return Err(Error::Precondition("negative Δt: edges must point forward in time".into()));
    }
    let x = dt_seconds.scale(1.0 / cfg.time_scale)?;
    let h = dense(p, "edge_enc.l1", x)?.leaky_relu()?;
    dense(p, "edge_enc.l2", h)
}

/// `sigmoid(y·W_g) ⊙ tanh(y·W_a)` followed by the output projection.
fn gated_mlp<'t>(p: &BoundParams<'t>, name: &str, y: Var<'t>) -> Result<Var<'t>> {
    let gate = dense(p, &format!("{name}.gate"), y)?.sigmoid()?;
    let act = dense(p, &format!("{name}.act"), y)?.tanh()?;
    dense(p, &format!("{name}.out"), gate.mul(act)?)
}

/// Residual edge update `e + MLP(e, v_s, v_r)`, row-aligned `[E×d]` inputs.
pub fn core_edge_update<'t>(e: Var<'t>, v_s: Var<'t>, v_r: Var<'t>, p: &BoundParams<'t>) -> Result<Var<'t>> {
    let y = Var::concat(&[e, v_s, v_r], 1)?;
    e.add(gated_mlp(p, "core_edge", y)?)
}

/// Residual node update `v + MLP(v, ē)`, row-aligned `[N×d]` inputs.
pub fn core_node_update<'t>(v: Var<'t>, e_bar: Var<'t>, p: &BoundParams<'t>) -> Result<Var<'t>> {
    let y = Var::concat(&[v, e_bar], 1)?;
    v.add(gated_mlp(p, "core_node", y)?)
}

/// Gamma heads on `[B×d]` readout attributes: `(α, β)`, each `[B×1]` and
/// strictly positive.
pub fn decode_gamma<'t>(v_last: Var<'t>, p: &BoundParams<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let head = |name: &str| -> Result<Var<'t>> {
        let h = dense(p, &format!("{name}.l1"), v_last)?.leaky_relu()?;
        dense(p, &format!("{name}.l2"), h)?.softplus()?.add_scalar(EPS0)
    };
    Ok((head("head_alpha")?, head("head_beta")?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_lengths() {
        assert_eq!(tcnn_output_len(1000), [125, 8, 1]);
        assert_eq!(tcnn_output_len(2556), [320, 20, 2]);
        assert_eq!(tcnn_output_len(256), [32, 2, 1]);
        assert_eq!(tcnn_output_len(16), [2, 1, 1]);
    }
}
