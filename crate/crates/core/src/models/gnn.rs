use std::cell::RefCell;

use rand::Rng;

use super::layers::{core_edge_update, core_node_update, decode_gamma, dense, edge_encode, tcnn_encode};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::gradcore::{BoundParams, Var};
use crate::graphnet::{batch_graphs, encode_process_decode, GnBlock, GraphIndependent};
use crate::sampler::CausalSample;

/// GNN-tCNN on a batch of causal samples: `(α, β)`, each `[B×1]`, read out
/// at every sample's latest node.
///
/// Nodes are encoded by the tCNN and edges by the Δt encoder, the shared
/// core block runs `n_core` times, and a final pointwise layer precedes the
/// Gamma heads.
pub fn gnn_tcnn_forward_batch<'t, R: Rng + ?Sized>(
    samples: &[&CausalSample],
    p: &BoundParams<'t>,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<(Var<'t>, Var<'t>)> {
    if samples.is_empty() {
        return Err(Error::Precondition("forward pass needs at least one sample".into()));
    }
    let graphs: Vec<_> = samples.iter().map(|s| &s.graph).collect();
    let (batched, map) = batch_graphs(&graphs)?;
    let conn = &batched.connectivity;

    let rng = RefCell::new(rng);
    let enc = GraphIndependent::new(
        |e| edge_encode(e, p, cfg),
        |v| tcnn_encode(v, p, cfg, training, &mut **rng.borrow_mut()),
    );
    let core = GnBlock::new(
        |e, v_r, v_s| core_edge_update(e, v_s, v_r, p),
        |e_bar, v| core_node_update(v, e_bar, p),
        cfg.aggregation,
    );
    let dec = GraphIndependent::new(Ok, |v| dense(p, "dec.node", v)?.leaky_relu());
    let out = encode_process_decode(conn, batched.to_state(p.tape()), &enc, &core, &dec, cfg.n_core)?;

    let readout: Vec<usize> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| map.node(i, s.readout))
        .collect();
    decode_gamma(out.nodes.gather_rows(&readout)?, p)
}

/// Single-sample forward pass: `(α, β)`, each `[1×1]`.
pub fn gnn_tcnn_forward<'t, R: Rng + ?Sized>(
    sample: &CausalSample,
    p: &BoundParams<'t>,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<(Var<'t>, Var<'t>)> {
    gnn_tcnn_forward_batch(&[sample], p, cfg, training, rng)
}
