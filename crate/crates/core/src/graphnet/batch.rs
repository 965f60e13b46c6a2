use std::borrow::Borrow;
use std::ops::Range;

use super::{AttributedGraph, Connectivity};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;

/// Node and edge ranges of each member of a batched graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    node_offsets: Vec<usize>,
    edge_offsets: Vec<usize>,
}

impl SegmentMap {
    pub fn len(&self) -> usize {
        self.node_offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self, i: usize) -> Range<usize> {
        self.node_offsets[i]..self.node_offsets[i + 1]
    }

    pub fn edges(&self, i: usize) -> Range<usize> {
        self.edge_offsets[i]..self.edge_offsets[i + 1]
    }

    /// Global index of local node `local` in graph `i`.
    pub fn node(&self, i: usize, local: usize) -> usize {
        self.node_offsets[i] + local
    }

    /// Splits a batched graph back into its members.
    pub fn split(&self, batched: &AttributedGraph) -> Result<Vec<AttributedGraph>> {
        (0..self.len())
            .map(|i| {
                let (nodes, edges) = (self.nodes(i), self.edges(i));
                let offset = nodes.start;
                let senders = batched.senders()[edges.clone()].iter().map(|s| s - offset).collect();
                let receivers = batched.receivers()[edges.clone()].iter().map(|r| r - offset).collect();
                AttributedGraph::new(
                    Connectivity::new(nodes.len(), senders, receivers)?,
                    batched.node_attrs.rows(nodes.start, nodes.end)?,
                    batched.edge_attrs.rows(edges.start, edges.end)?,
                )
            })
            .collect()
    }
}

/// Disjoint union of `graphs`, with node indices offset per member.
pub fn batch_graphs<G: Borrow<AttributedGraph>>(graphs: &[G]) -> Result<(AttributedGraph, SegmentMap)> {
    let first = graphs
        .first()
        .map(Borrow::borrow)
        .ok_or_else(|| Error::Precondition("cannot batch zero graphs".into()))?;
    let node_tail = &first.node_attrs.shape()[1..];
    let edge_tail = &first.edge_attrs.shape()[1..];
    let mut node_offsets = vec![0];
    let mut edge_offsets = vec![0];
    let mut senders = Vec::new();
    let mut receivers = Vec::new();
    for g in graphs.iter().map(Borrow::borrow) {
        if &g.node_attrs.shape()[1..] != node_tail || &g.edge_attrs.shape()[1..] != edge_tail {
            return Err(Error::Dimension(format!(
                "attribute widths differ within batch: nodes {:?} vs {:?}, edges {:?} vs {:?}",
                g.node_attrs.shape(),
                first.node_attrs.shape(),
                g.edge_attrs.shape(),
                first.edge_attrs.shape()
            )));
        }
        let offset = *node_offsets.last().expect("nonempty");
        senders.extend(g.senders().iter().map(|s| s + offset));
        receivers.extend(g.receivers().iter().map(|r| r + offset));
        node_offsets.push(offset + g.n_nodes());
        edge_offsets.push(edge_offsets.last().expect("nonempty") + g.n_edges());
    }
    let stack = |rows: usize, tail: &[usize], part: fn(&AttributedGraph) -> &Tensor| {
        let mut data = Vec::new();
        for g in graphs {
            data.extend_from_slice(part(g.borrow()).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data)
    };
    let n_nodes = *node_offsets.last().expect("nonempty");
    let n_edges = *edge_offsets.last().expect("nonempty");
    let batched = AttributedGraph::new(
        Connectivity::new(n_nodes, senders, receivers)?,
        stack(n_nodes, node_tail, |g| &g.node_attrs)?,
        stack(n_edges, edge_tail, |g| &g.edge_attrs)?,
    )?;
    Ok((
        batched,
        SegmentMap {
            node_offsets,
            edge_offsets,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(v: f64) -> AttributedGraph {
        AttributedGraph::new(
            Connectivity::new(2, vec![0], vec![1]).unwrap(),
            Tensor::matrix(&[vec![v], vec![v + 1.0]]).unwrap(),
            Tensor::matrix(&[vec![v * 10.0]]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn batch_of_one_is_identity() {
        let g = pair(1.0);
        let (b, map) = batch_graphs(std::slice::from_ref(&g)).unwrap();
        assert_eq!(b, g);
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn two_pairs_offset_by_two() {
        let (b, map) = batch_graphs(&[pair(1.0), pair(5.0)]).unwrap();
        assert_eq!(b.n_nodes(), 4);
        assert_eq!(b.senders(), &[0, 2]);
        assert_eq!(b.receivers(), &[1, 3]);
        assert_eq!(map.nodes(1), 2..4);
        assert_eq!(map.split(&b).unwrap(), vec![pair(1.0), pair(5.0)]);
    }

    #[test]
    fn width_mismatch_rejected() {
        let other = AttributedGraph::new(
            Connectivity::new(1, vec![], vec![]).unwrap(),
            Tensor::matrix(&[vec![1.0, 2.0]]).unwrap(),
            Tensor::zeros(vec![0, 1]),
        )
        .unwrap();
        assert!(matches!(batch_graphs(&[pair(1.0), other]), Err(Error::Dimension(_))));
    }
}
