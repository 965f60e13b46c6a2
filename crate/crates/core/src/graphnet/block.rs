use super::{Connectivity, GraphState};
use crate::error::{Error, Result};
use crate::gradcore::{Extremum, Var};

/// Edge-to-node aggregation. Every variant is permutation-invariant and
/// maps nodes without incoming edges to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
    Max,
    Min,
}

impl Aggregation {
    pub fn apply<'t>(self, edges: Var<'t>, conn: &Connectivity) -> Result<Var<'t>> {
        let receivers = conn.receivers();
        let n = conn.n_nodes();
        match self {
            Aggregation::Mean => aggregate_mean(edges, receivers, n),
            Aggregation::Sum => edges.segment_sum(receivers, &vec![1.0; receivers.len()], n),
            Aggregation::Max => edges.segment_extremum(receivers, n, Extremum::Max),
            Aggregation::Min => edges.segment_extremum(receivers, n, Extremum::Min),
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            "max" => Ok(Self::Max),
            "min" => Ok(Self::Min),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

/// Per-node mean of incoming edge rows `[E×d] → [N×d]`.
pub fn aggregate_mean<'t>(edges: Var<'t>, receivers: &[usize], n_nodes: usize) -> Result<Var<'t>> {
    let mut count = vec![0usize; n_nodes];
    for &r in receivers {
        if r >= n_nodes {
            return Err(Error::Dimension(format!("receiver {r} ≥ {n_nodes}")));
        }
        count[r] += 1;
    }
    let scale: Vec<f64> = receivers.iter().map(|&r| 1.0 / count[r] as f64).collect();
    edges.segment_sum(receivers, &scale, n_nodes)
}

/// A graph-to-graph transformation on a tape.
pub trait Block<'t> {
    fn apply(&self, conn: &Connectivity, g: GraphState<'t>) -> Result<GraphState<'t>>;
}

fn expect_rows(v: Var<'_>, rows: usize, what: &str) -> Result<()> {
    let shape = v.shape();
    if shape.first() != Some(&rows) {
        return Err(Error::Dimension(format!("{what} returned {shape:?}, expected {rows} rows")));
    }
    Ok(())
}

/// Full GN block. The edge function receives `(edges, receiver attrs,
/// sender attrs)` row-aligned per edge; the node function receives
/// `(aggregated messages, node attrs)` row-aligned per node.
pub struct GnBlock<E, V> {
    pub edge_fn: E,
    pub node_fn: V,
    pub aggregation: Aggregation,
}

impl<E, V> GnBlock<E, V> {
    pub fn new<'t>(edge_fn: E, node_fn: V, aggregation: Aggregation) -> Self
    where
        E: Fn(Var<'t>, Var<'t>, Var<'t>) -> Result<Var<'t>>,
        V: Fn(Var<'t>, Var<'t>) -> Result<Var<'t>>,
    {
        Self {
            edge_fn,
            node_fn,
            aggregation,
        }
    }
}

impl<'t, E, V> Block<'t> for GnBlock<E, V>
where
    E: Fn(Var<'t>, Var<'t>, Var<'t>) -> Result<Var<'t>>,
    V: Fn(Var<'t>, Var<'t>) -> Result<Var<'t>>,
{
    fn apply(&self, conn: &Connectivity, g: GraphState<'t>) -> Result<GraphState<'t>> {
        let v_r = g.nodes.gather_rows(conn.receivers())?;
        let v_s = g.nodes.gather_rows(conn.senders())?;
        let edges = (self.edge_fn)(g.edges, v_r, v_s)?;
        expect_rows(edges, conn.n_edges(), "edge function")?;
        let messages = self.aggregation.apply(edges, conn)?;
        let nodes = (self.node_fn)(messages, g.nodes)?;
        expect_rows(nodes, conn.n_nodes(), "node function")?;
        Ok(GraphState { nodes, edges })
    }
}

/// Pointwise block: edges and nodes are transformed without message passing.
pub struct GraphIndependent<E, V> {
    pub edge_fn: E,
    pub node_fn: V,
}

impl<E, V> GraphIndependent<E, V> {
    pub fn new<'t>(edge_fn: E, node_fn: V) -> Self
    where
        E: Fn(Var<'t>) -> Result<Var<'t>>,
        V: Fn(Var<'t>) -> Result<Var<'t>>,
    {
        Self { edge_fn, node_fn }
    }
}

impl<'t, E, V> Block<'t> for GraphIndependent<E, V>
where
    E: Fn(Var<'t>) -> Result<Var<'t>>,
    V: Fn(Var<'t>) -> Result<Var<'t>>,
{
    fn apply(&self, conn: &Connectivity, g: GraphState<'t>) -> Result<GraphState<'t>> {
        let edges = (self.edge_fn)(g.edges)?;
        expect_rows(edges, conn.n_edges(), "edge function")?;
        let nodes = (self.node_fn)(g.nodes)?;
        expect_rows(nodes, conn.n_nodes(), "node function")?;
        Ok(GraphState { nodes, edges })
    }
}

/// `dec ∘ core^{n_core} ∘ enc`, reusing the same `core` block each step.
pub fn encode_process_decode<'t>(
    conn: &Connectivity,
    g: GraphState<'t>,
    enc: &dyn Block<'t>,
    core: &dyn Block<'t>,
    dec: &dyn Block<'t>,
    n_core: usize,
) -> Result<GraphState<'t>> {
    if n_core == 0 {
        return Err(Error::Precondition("encode-process-decode needs at least one core step".into()));
    }
    let mut g = enc.apply(conn, g)?;
    for _ in 0..n_core {
        g = core.apply(conn, g)?;
    }
    dec.apply(conn, g)
}
