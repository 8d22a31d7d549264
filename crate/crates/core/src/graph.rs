//! Attributed graphs, edge dropping, feature shuffling and mean readout.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{arg_err, Error, Result};
use crate::scalar::Scalar;

/// Undirected edge stored with `u < v`.
pub type Edge = (usize, usize);

/// Unvalidated graph components, as read from disk or built by hand.
#[derive(Debug, Clone)]
pub struct GraphParts<T> {
    pub num_nodes: usize,
    pub edges: Vec<Edge>,
    pub features: Array2<T>,
    pub labels: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    EmptyGraph,
    EdgeOutOfRange { edge: usize, u: usize, v: usize },
    SelfLoop { edge: usize, node: usize },
    FeatureRows { expected: usize, found: usize },
    LabelCount { expected: usize, found: usize },
    NonBinaryLabel { node: usize, value: u8 },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::EmptyGraph => write!(f, "graph has no nodes"),
            Diagnostic::EdgeOutOfRange { edge, u, v } => {
                write!(f, "edge {edge} ({u}, {v}) has an endpoint out of range")
            }
            Diagnostic::SelfLoop { edge, node } => write!(f, "edge {edge} is a self-loop on node {node}"),
            Diagnostic::FeatureRows { expected, found } => {
                write!(f, "feature matrix has {found} rows, expected {expected}")
            }
            Diagnostic::LabelCount { expected, found } => {
                write!(f, "label vector has {found} entries, expected {expected}")
            }
            Diagnostic::NonBinaryLabel { node, value } => {
                write!(f, "node {node} has non-binary label {value}")
            }
        }
    }
}

/// Reports every violated graph invariant. An empty result means the parts
/// form a valid [`AttributedGraph`].
pub fn validate_graph<T>(parts: &GraphParts<T>) -> Vec<Diagnostic> {
    let n = parts.num_nodes;
    let mut out = Vec::new();
    if n == 0 {
        out.push(Diagnostic::EmptyGraph);
    }
    for (edge, &(u, v)) in parts.edges.iter().enumerate() {
        if u >= n || v >= n {
            out.push(Diagnostic::EdgeOutOfRange { edge, u, v });
        } else if u == v {
            out.push(Diagnostic::SelfLoop { edge, node: u });
        }
    }
    if parts.features.nrows() != n {
        out.push(Diagnostic::FeatureRows {
            expected: n,
            found: parts.features.nrows(),
        });
    }
    if let Some(labels) = &parts.labels {
        if labels.len() != n {
            out.push(Diagnostic::LabelCount {
                expected: n,
                found: labels.len(),
            });
        }
        for (node, &value) in labels.iter().enumerate() {
            if value > 1 {
                out.push(Diagnostic::NonBinaryLabel { node, value });
            }
        }
    }
    out
}

/// Node adjacency lists, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    lists: Vec<Vec<usize>>,
}

impl Neighborhoods {
    pub fn from_edges(num_nodes: usize, edges: &[Edge]) -> Self {
        let mut lists = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            lists[u].push(v);
            lists[v].push(u);
        }
        for l in &mut lists {
            l.sort_unstable();
        }
        Neighborhoods { lists }
    }

    pub fn num_nodes(&self) -> usize {
        self.lists.len()
    }

    pub fn of(&self, node: usize) -> &[usize] {
        &self.lists[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.lists[node].len()
    }
}

/// Immutable attributed graph with a canonical, deduplicated edge list.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedGraph<T> {
    edges: Vec<Edge>,
    features: Array2<T>,
    labels: Option<Vec<u8>>,
    neighbors: Neighborhoods,
}

impl<T: Scalar> AttributedGraph<T> {
    pub fn new(parts: GraphParts<T>) -> Result<Self> {
        let diags = validate_graph(&parts);
        if !diags.is_empty() {
            let msg: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
            return Err(Error::InvalidGraph(msg.join("; ")));
        }
        let mut edges: Vec<Edge> = parts
            .edges
            .into_iter()
            .map(|(u, v)| if u < v { (u, v) } else { (v, u) })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        let neighbors = Neighborhoods::from_edges(parts.num_nodes, &edges);
        Ok(AttributedGraph {
            edges,
            features: parts.features,
            labels: parts.labels,
            neighbors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.num_nodes()
    }

    pub fn num_attrs(&self) -> usize {
        self.features.ncols()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn features(&self) -> &Array2<T> {
        &self.features
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn neighbors(&self) -> &Neighborhoods {
        &self.neighbors
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors.of(i).binary_search(&j).is_ok()
    }

    /// Dense 0/1 adjacency. Only meant for small graphs and tests.
    pub fn adjacency(&self) -> Array2<u8> {
        let n = self.num_nodes();
        let mut a = Array2::zeros((n, n));
        for &(u, v) in &self.edges {
            a[[u, v]] = 1;
            a[[v, u]] = 1;
        }
        a
    }

    /// Same structure and features with ground-truth labels removed.
    pub fn without_labels(&self) -> Self {
        AttributedGraph {
            labels: None,
            ..self.clone()
        }
    }

    pub fn full_mask(&self) -> EdgeMask {
        EdgeMask {
            num_nodes: self.num_nodes(),
            kept: self.edges.clone(),
        }
    }
}

/// Subset of a parent graph's edges that survived dropping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMask {
    num_nodes: usize,
    kept: Vec<Edge>,
}

impl EdgeMask {
    pub fn kept(&self) -> &[Edge] {
        &self.kept
    }

    pub fn neighborhoods(&self) -> Neighborhoods {
        Neighborhoods::from_edges(self.num_nodes, &self.kept)
    }
}

/// Drops each undirected edge independently with probability `p`.
///
/// One uniform draw per edge, in canonical edge order; the edge survives when
/// the draw is at least `p`.
pub fn drop_edges<T: Scalar, R: Rng + ?Sized>(
    graph: &AttributedGraph<T>,
    p: f64,
    rng: &mut R,
) -> Result<EdgeMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(arg_err(format!("drop probability {p} outside [0, 1]")));
    }
    let kept = graph
        .edges()
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() >= p)
        .collect();
    Ok(EdgeMask {
        num_nodes: graph.num_nodes(),
        kept,
    })
}

/// Uniform random permutation of `0..n`.
pub fn shuffle_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Row `i` of the result is row `perm[i]` of `x`.
pub fn permute_rows<T: Scalar>(x: ArrayView2<'_, T>, perm: &[usize]) -> Array2<T> {
    x.select(Axis(0), perm)
}

/// Shuffles node features across the graph; structure is untouched.
pub fn corrupt_features<T: Scalar, R: Rng + ?Sized>(
    graph: &AttributedGraph<T>,
    rng: &mut R,
) -> Array2<T> {
    let perm = shuffle_permutation(graph.num_nodes(), rng);
    permute_rows(graph.features().view(), &perm)
}

/// Graph-level summary: arithmetic mean of the node embeddings.
pub fn readout_mean<T: Scalar>(embeddings: ArrayView2<'_, T>) -> Result<Array1<T>> {
    embeddings
        .mean_axis(Axis(0))
        .ok_or_else(|| arg_err("readout of an empty embedding matrix"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::array;

    fn path_graph(n: usize, d: usize) -> AttributedGraph<f64> {
        let features = Array2::from_shape_fn((n, d), |(i, j)| (i * d + j) as f64);
        AttributedGraph::new(GraphParts {
            num_nodes: n,
            edges: (0..n - 1).map(|i| (i, i + 1)).collect(),
            features,
            labels: Some(vec![0; n]),
        })
        .unwrap()
    }

    #[test]
    fn well_formed_graph_has_no_diagnostics() {
        let g = path_graph(5, 2);
        let parts = GraphParts {
            num_nodes: 5,
            edges: g.edges().to_vec(),
            features: g.features().clone(),
            labels: Some(vec![0, 1, 0, 0, 1]),
        };
        assert!(validate_graph(&parts).is_empty());
    }

    #[test]
    fn out_of_range_edge_is_reported() {
        let parts = GraphParts {
            num_nodes: 3,
            edges: vec![(0, 1), (0, 3)],
            features: Array2::<f64>::zeros((3, 2)),
            labels: None,
        };
        assert_eq!(
            validate_graph(&parts),
            vec![Diagnostic::EdgeOutOfRange { edge: 1, u: 0, v: 3 }]
        );
        assert!(AttributedGraph::new(parts).is_err());
    }

    #[test]
    fn non_binary_label_and_self_loop_are_reported() {
        let parts = GraphParts {
            num_nodes: 3,
            edges: vec![(1, 1)],
            features: Array2::<f64>::zeros((2, 2)),
            labels: Some(vec![0, 2, 1]),
        };
        let d = validate_graph(&parts);
        assert_eq!(d.len(), 3);
        assert!(d.contains(&Diagnostic::NonBinaryLabel { node: 1, value: 2 }));
        assert!(d.contains(&Diagnostic::SelfLoop { edge: 0, node: 1 }));
        assert!(d.contains(&Diagnostic::FeatureRows { expected: 3, found: 2 }));
    }

    #[test]
    fn adjacency_is_symmetric_and_matches_edges() {
        let g = AttributedGraph::new(GraphParts {
            num_nodes: 4,
            edges: vec![(2, 0), (0, 2), (3, 1)],
            features: Array2::<f64>::zeros((4, 1)),
            labels: None,
        })
        .unwrap();
        assert_eq!(g.edges(), &[(0, 2), (1, 3)]);
        let a = g.adjacency();
        assert_eq!(a, a.t());
        assert!(g.has_edge(2, 0) && g.has_edge(3, 1) && !g.has_edge(0, 1));
    }

    #[test]
    fn drop_edges_extremes() {
        let g = path_graph(30, 1);
        let mut rng = stream(1, Stream::Augment);
        assert_eq!(drop_edges(&g, 0.0, &mut rng).unwrap().kept(), g.edges());
        assert!(drop_edges(&g, 1.0, &mut rng).unwrap().kept().is_empty());
        assert!(drop_edges(&g, 1.5, &mut rng).is_err());
        assert!(drop_edges(&g, -0.1, &mut rng).is_err());
    }

    #[test]
    fn drop_edges_is_deterministic_and_a_subset() {
        let g = path_graph(200, 1);
        let a = drop_edges(&g, 0.3, &mut stream(9, Stream::Augment)).unwrap();
        let b = drop_edges(&g, 0.3, &mut stream(9, Stream::Augment)).unwrap();
        assert_eq!(a, b);
        assert!(a.kept().iter().all(|&(u, v)| g.has_edge(u, v)));
        // symmetric by construction: neighborhoods derived from undirected pairs
        let nb = a.neighborhoods();
        for i in 0..200 {
            for &j in nb.of(i) {
                assert!(nb.of(j).contains(&i));
            }
        }
    }

    #[test]
    fn single_node_corruption_is_identity() {
        let g = AttributedGraph::new(GraphParts {
            num_nodes: 1,
            edges: vec![],
            features: array![[1.0, 2.0, 3.0]],
            labels: None,
        })
        .unwrap();
        assert_eq!(corrupt_features(&g, &mut stream(3, Stream::Corrupt)), *g.features());
    }

    #[test]
    fn corruption_matches_independently_sampled_permutation() {
        let g = path_graph(4, 3);
        let out = corrupt_features(&g, &mut stream(11, Stream::Corrupt));
        // oracle: shuffle an index vector with an identically seeded stream
        let mut idx = [0usize, 1, 2, 3];
        idx.shuffle(&mut stream(11, Stream::Corrupt));
        for (i, &src) in idx.iter().enumerate() {
            for j in 0..3 {
                assert_eq!(out[[i, j]], g.features()[[src, j]]);
            }
        }
    }

    #[test]
    fn readout_examples() {
        let h = array![[0.0, 2.0], [2.0, 0.0]];
        assert_eq!(readout_mean(h.view()).unwrap(), array![1.0, 1.0]);
        let same = Array2::from_shape_fn((7, 3), |(_, j)| j as f64 * 0.5 - 1.0);
        assert_eq!(readout_mean(same.view()).unwrap(), array![-1.0, -0.5, 0.0]);
        assert!(readout_mean(Array2::<f64>::zeros((0, 3)).view()).is_err());
    }

    #[test]
    fn readout_matches_naive_accumulation() {
        use rand::Rng;
        let mut rng = stream(5, Stream::Init);
        let x: Array2<f64> = Array2::from_shape_fn((50, 8), |_| rng.random_range(-3.0..3.0));
        let r = readout_mean(x.view()).unwrap();
        for j in 0..8 {
            let mut s = 0.0f64;
            for i in 0..50 {
                s += x[[i, j]];
            }
            assert!((r[j] - s / 50.0).abs() < 1e-12);
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn graph_strategy() -> impl Strategy<Value = AttributedGraph<f64>> {
        (1usize..12, 1usize..4).prop_flat_map(|(n, d)| {
            (
                Just(n),
                proptest::collection::vec((0..n, 0..n), 0..30),
                proptest::collection::vec(-5.0f64..5.0, n * d),
                Just(d),
            )
                .prop_map(|(n, edges, feats, d)| {
                    let edges = edges.into_iter().filter(|(u, v)| u != v).collect();
                    AttributedGraph::new(GraphParts {
                        num_nodes: n,
                        edges,
                        features: Array2::from_shape_vec((n, d), feats).unwrap(),
                        labels: None,
                    })
                    .unwrap()
                })
        })
    }

    fn sorted_rows(x: &Array2<f64>) -> Vec<Vec<u64>> {
        let mut rows: Vec<Vec<u64>> = x
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows
    }

    proptest! {
        #[test]
        fn corruption_preserves_row_multiset(g in graph_strategy(), seed in any::<u64>()) {
            let out = corrupt_features(&g, &mut stream(seed, Stream::Corrupt));
            prop_assert_eq!(sorted_rows(&out), sorted_rows(g.features()));
        }

        #[test]
        fn readout_is_permutation_invariant(g in graph_strategy(), seed in any::<u64>()) {
            let perm = shuffle_permutation(g.num_nodes(), &mut stream(seed, Stream::Corrupt));
            let a = readout_mean(g.features().view()).unwrap();
            let b = readout_mean(permute_rows(g.features().view(), &perm).view()).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn dropped_mask_is_subset(g in graph_strategy(), p in 0.0f64..=1.0, seed in any::<u64>()) {
            let m = drop_edges(&g, p, &mut stream(seed, Stream::Augment)).unwrap();
            prop_assert!(m.kept().iter().all(|e| g.edges().binary_search(e).is_ok()));
        }
    }
}
