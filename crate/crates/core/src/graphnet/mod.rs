//! Attributed graphs and GraphNet blocks without global attributes.
//!
//! A full block updates every edge from its own attribute and the attributes
//! of its receiver and sender, aggregates the updated edges arriving at each
//! node, then updates every node from that aggregate and its own attribute.
//! Graph-independent blocks transform edges and nodes pointwise.

mod batch;
mod block;

pub use batch::{batch_graphs, SegmentMap};
pub use block::{aggregate_mean, encode_process_decode, Aggregation, Block, GnBlock, GraphIndependent};

use crate::error::{Error, Result};
use crate::gradcore::{Tape, Tensor, Var};

/// Sender/receiver structure of a directed multigraph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connectivity {
    n_nodes: usize,
    senders: Vec<usize>,
    receivers: Vec<usize>,
}

impl Connectivity {
    pub fn new(n_nodes: usize, senders: Vec<usize>, receivers: Vec<usize>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::Precondition("a graph needs at least one node".into()));
        }
        if senders.len() != receivers.len() {
            return Err(Error::Dimension(format!(
                "{} senders but {} receivers",
                senders.len(),
                receivers.len()
            )));
        }
        if let Some(&bad) = senders.iter().chain(&receivers).find(|&&i| i >= n_nodes) {
            return Err(Error::Dimension(format!("node index {bad} out of range for {n_nodes} nodes")));
        }
        Ok(Self {
            n_nodes,
            senders,
            receivers,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.senders.len()
    }

    pub fn senders(&self) -> &[usize] {
        &self.senders
    }

    pub fn receivers(&self) -> &[usize] {
        &self.receivers
    }

    /// Number of incoming edges per node.
    pub fn in_degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes];
        for &r in &self.receivers {
            deg[r] += 1;
        }
        deg
    }
}

/// Graph with concrete node and edge attributes. The first axis of
/// `node_attrs` indexes nodes, the first axis of `edge_attrs` indexes edges.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedGraph {
    pub connectivity: Connectivity,
    pub node_attrs: Tensor,
    pub edge_attrs: Tensor,
}

impl AttributedGraph {
    pub fn new(connectivity: Connectivity, node_attrs: Tensor, edge_attrs: Tensor) -> Result<Self> {
        if node_attrs.shape().first() != Some(&connectivity.n_nodes()) {
            return Err(Error::Dimension(format!(
                "node attributes {:?} for {} nodes",
                node_attrs.shape(),
                connectivity.n_nodes()
            )));
        }
        if edge_attrs.shape().first() != Some(&connectivity.n_edges()) {
            return Err(Error::Dimension(format!(
                "edge attributes {:?} for {} edges",
                edge_attrs.shape(),
                connectivity.n_edges()
            )));
        }
        Ok(Self {
            connectivity,
            node_attrs,
            edge_attrs,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.connectivity.n_nodes()
    }

    pub fn n_edges(&self) -> usize {
        self.connectivity.n_edges()
    }

    pub fn senders(&self) -> &[usize] {
        self.connectivity.senders()
    }

    pub fn receivers(&self) -> &[usize] {
        self.connectivity.receivers()
    }

    /// Records the attributes on `tape` without gradients.
    pub fn to_state<'t>(&self, tape: &'t Tape) -> GraphState<'t> {
        GraphState {
            nodes: tape.constant(self.node_attrs.clone()),
            edges: tape.constant(self.edge_attrs.clone()),
        }
    }

    /// Reassembles a graph from on-tape attributes.
    pub fn from_state(connectivity: Connectivity, state: &GraphState<'_>) -> Result<Self> {
        Self::new(connectivity, state.nodes.value(), state.edges.value())
    }

    /// Same graph with edges stored in the order `perm` (`perm[k]` is the
    /// old index of new edge `k`).
    pub fn permute_edges(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_edges())?;
        let senders = perm.iter().map(|&k| self.senders()[k]).collect();
        let receivers = perm.iter().map(|&k| self.receivers()[k]).collect();
        let edge_attrs = take_rows(&self.edge_attrs, perm)?;
        Self::new(
            Connectivity::new(self.n_nodes(), senders, receivers)?,
            self.node_attrs.clone(),
            edge_attrs,
        )
    }

    /// Same graph with nodes stored in the order `perm` (`perm[i]` is the
    /// old index of new node `i`); edge endpoints are remapped.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_nodes())?;
        let mut new_index = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            new_index[old] = new;
        }
        let senders = self.senders().iter().map(|&s| new_index[s]).collect();
        let receivers = self.receivers().iter().map(|&r| new_index[r]).collect();
        Self::new(
            Connectivity::new(self.n_nodes(), senders, receivers)?,
            take_rows(&self.node_attrs, perm)?,
            self.edge_attrs.clone(),
        )
    }

    /// Plain-text listing of nodes and edges with attribute norms. The first
    /// edge-attribute component is printed as `Δt`.
    pub fn debug_dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "graph: {} nodes, {} edges", self.n_nodes(), self.n_edges());
        for i in 0..self.n_nodes() {
            let row = self.node_attrs.rows(i, i + 1).expect("in range");
            let _ = writeln!(out, "node {i:>4}  |v| = {:.6e}", row.norm());
        }
        for k in 0..self.n_edges() {
            let row = self.edge_attrs.rows(k, k + 1).expect("in range");
            let dt = row.data().first().copied().unwrap_or(f64::NAN);
            let _ = writeln!(
                out,
                "edge {k:>4}  {} -> {}  Δt = {dt}  |e| = {:.6e}",
                self.senders()[k],
                self.receivers()[k],
                row.norm()
            );
        }
        out
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || !perm.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Precondition(format!("not a permutation of 0..{n}")));
    }
    Ok(())
}

fn take_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let rows: Vec<Tensor> = idx.iter().map(|&i| t.rows(i, i + 1)).collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(t.clone());
    }
    Tensor::concat_rows(&rows)
}

/// Node and edge attributes recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GraphState<'t> {
    pub nodes: Var<'t>,
    pub edges: Var<'t>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn connectivity_validation() {
        assert!(Connectivity::new(0, vec![], vec![]).is_err());
        assert!(Connectivity::new(2, vec![0], vec![2]).is_err());
        assert!(Connectivity::new(2, vec![0, 1], vec![1]).is_err());
        // self-edges are allowed
        let c = Connectivity::new(2, vec![1, 0], vec![1, 1]).unwrap();
        assert_eq!(c.in_degree(), vec![0, 2]);
    }

    #[test]
    fn attribute_rows_must_match() {
        let c = Connectivity::new(2, vec![0], vec![1]).unwrap();
        assert!(AttributedGraph::new(c.clone(), Tensor::zeros(vec![3, 1]), Tensor::zeros(vec![1, 1])).is_err());
        assert!(AttributedGraph::new(c, Tensor::zeros(vec![2, 1]), Tensor::zeros(vec![1, 1])).is_ok());
    }

    #[test]
    fn debug_dump_lists_edges() {
        let c = Connectivity::new(2, vec![0], vec![1]).unwrap();
        let g = AttributedGraph::new(
            c,
            Tensor::matrix(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap(),
            Tensor::matrix(&[vec![150.0]]).unwrap(),
        )
        .unwrap();
        let dump = g.debug_dump();
        assert!(dump.contains("0 -> 1  Δt = 150"));
        assert!(dump.contains("|v| = 5.000000e0"));
    }

    #[test]
    fn node_permutation_remaps_edges() {
        let c = Connectivity::new(3, vec![0, 1], vec![2, 2]).unwrap();
        let g = AttributedGraph::new(
            c,
            Tensor::matrix(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap(),
            Tensor::matrix(&[vec![5.0], vec![6.0]]).unwrap(),
        )
        .unwrap();
        let p = g.permute_nodes(&[2, 0, 1]).unwrap();
        assert_eq!(p.node_attrs.data(), &[2.0, 0.0, 1.0]);
        assert_eq!(p.senders(), &[1, 2]);
        assert_eq!(p.receivers(), &[0, 0]);
    }
}
