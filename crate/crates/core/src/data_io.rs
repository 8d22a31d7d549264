//! Dataset files, split and K-shot sampling, and the synthetic cross-domain
//! benchmark generator.
//!
//! On-disk layout of one dataset directory:
//!
//! ```text
//! meta.json      DatasetDescriptor
//! edges.tsv      header "src\tdst", one undirected edge per row, src < dst
//! features.tsv   n rows of d tab-separated reals, no header
//! labels.tsv     n rows of 0/1, no header
//! ```

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::graph::{validate_graph, AttributedGraph, Edge, GraphParts};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub num_nodes: usize,
    pub num_attrs: usize,
    pub num_edges: usize,
    pub num_anomalies: usize,
    pub directed: bool,
}

impl DatasetDescriptor {
    pub fn describe<T: Scalar>(name: &str, graph: &AttributedGraph<T>) -> Self {
        DatasetDescriptor {
            name: name.to_string(),
            num_nodes: graph.num_nodes(),
            num_attrs: graph.num_attrs(),
            num_edges: graph.edges().len(),
            num_anomalies: graph.labels().map_or(0, |l| l.iter().filter(|&&y| y == 1).count()),
            directed: false,
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses a headerless tab-separated real matrix.
pub fn read_matrix_tsv<T: Scalar>(path: &Path, expect_cols: Option<usize>) -> Result<Array2<T>> {
    let text = read(path)?;
    let mut values = Vec::new();
    let mut rows = 0;
    let mut cols = expect_cols;
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split('\t') {
            let v: T = field
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("not a number: {field:?}")))?;
            values.push(v);
            count += 1;
        }
        match cols {
            Some(c) if c != count => {
                return Err(parse_err(path, i + 1, format!("expected {c} columns, found {count}")));
            }
            None => cols = Some(count),
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Array2::from_shape_vec((rows, cols), values).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn format_matrix_tsv<T: Scalar>(m: &Array2<T>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    out
}

/// Reads one integer per line (a labels file or a node index list).
pub fn read_column<V: std::str::FromStr>(path: &Path) -> Result<Vec<V>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("not an integer: {l:?}")))
        })
        .collect()
}

pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<(AttributedGraph<T>, DatasetDescriptor)> {
    let meta_path = dir.join("meta.json");
    let desc: DatasetDescriptor = serde_json::from_str(&read(&meta_path)?)
        .map_err(|e| parse_err(&meta_path, e.line(), e.to_string()))?;
    if desc.directed {
        return Err(parse_err(&meta_path, 1, "directed graphs are not supported"));
    }

    let edges_path = dir.join("edges.tsv");
    let text = read(&edges_path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "src\tdst" => {}
        _ => return Err(parse_err(&edges_path, 1, "missing header \"src\\tdst\"")),
    }
    let mut edges: Vec<Edge> = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let mut it = line.split('\t');
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(&edges_path, lineno, "expected two columns"));
        };
        let parse = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| parse_err(&edges_path, lineno, format!("bad node index {s:?}")))
        };
        let (u, v) = (parse(a)?, parse(b)?);
        if u >= desc.num_nodes || v >= desc.num_nodes {
            return Err(parse_err(
                &edges_path,
                lineno,
                format!("edge ({u}, {v}) references a node outside 0..{}", desc.num_nodes),
            ));
        }
        if u == v {
            return Err(parse_err(&edges_path, lineno, format!("self-loop on node {u}")));
        }
        edges.push((u, v));
    }
    if edges.len() != desc.num_edges {
        return Err(parse_err(
            &edges_path,
            0,
            format!("meta.json declares {} edges, file has {}", desc.num_edges, edges.len()),
        ));
    }

    let features_path = dir.join("features.tsv");
    let features: Array2<T> = read_matrix_tsv(&features_path, Some(desc.num_attrs))?;
    if features.nrows() != desc.num_nodes {
        return Err(parse_err(
            &features_path,
            0,
            format!("{} rows for {} nodes", features.nrows(), desc.num_nodes),
        ));
    }

    let labels_path = dir.join("labels.tsv");
    let labels: Vec<u8> = read_column(&labels_path)?;
    if labels.len() != desc.num_nodes {
        return Err(parse_err(&labels_path, 0, format!("{} labels for {} nodes", labels.len(), desc.num_nodes)));
    }
    if let Some(i) = labels.iter().position(|&y| y > 1) {
        return Err(parse_err(&labels_path, i + 1, format!("non-binary label {}", labels[i])));
    }
    let anomalies = labels.iter().filter(|&&y| y == 1).count();
    if anomalies != desc.num_anomalies {
        return Err(parse_err(
            &labels_path,
            0,
            format!("meta.json declares {} anomalies, file has {anomalies}", desc.num_anomalies),
        ));
    }

    let parts = GraphParts {
        num_nodes: desc.num_nodes,
        edges,
        features,
        labels: Some(labels),
    };
    let diags = validate_graph(&parts);
    if let Some(d) = diags.first() {
        return Err(Error::InvalidGraph(d.to_string()));
    }
    let graph = AttributedGraph::new(parts)?;
    if graph.edges().len() != desc.num_edges {
        return Err(parse_err(&edges_path, 0, "duplicate edges"));
    }
    Ok((graph, desc))
}

pub fn save_dataset<T: Scalar>(graph: &AttributedGraph<T>, name: &str, dir: &Path) -> Result<DatasetDescriptor> {
    let labels = graph
        .labels()
        .ok_or_else(|| arg_err("cannot save a graph without labels"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let desc = DatasetDescriptor::describe(name, graph);
    write(&dir.join("meta.json"), &(serde_json::to_string_pretty(&desc)? + "\n"))?;

    let mut edges = String::from("src\tdst\n");
    for &(u, v) in graph.edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write(&dir.join("edges.tsv"), &edges)?;
    write(&dir.join("features.tsv"), &format_matrix_tsv(graph.features()))?;
    let labels: String = labels.iter().map(|y| format!("{y}\n")).collect();
    write(&dir.join("labels.tsv"), &labels)?;
    Ok(desc)
}

/// Disjoint train/validation/test node sets covering `0..n`, each ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMasks {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitMasks {
    pub fn num_nodes(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &(serde_json::to_string(self)? + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read(path)?).map_err(|e| parse_err(path, e.line(), e.to_string()))
    }
}

/// Split sizes: floors of 40/20/40 %, remainder handed out train-first.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let mut sizes = [2 * n / 5, n / 5, 2 * n / 5];
    let mut rem = n - sizes.iter().sum::<usize>();
    let mut k = 0;
    while rem > 0 {
        sizes[k % 3] += 1;
        rem -= 1;
        k += 1;
    }
    (sizes[0], sizes[1], sizes[2])
}

pub fn make_split(num_nodes: usize, seed: u64) -> Result<SplitMasks> {
    if num_nodes < 5 {
        return Err(arg_err(format!("need at least 5 nodes to split, got {num_nodes}")));
    }
    let (a, b, _) = split_sizes(num_nodes);
    let mut perm: Vec<usize> = (0..num_nodes).collect();
    perm.shuffle(&mut stream(seed, Stream::Split));
    let mut train = perm[..a].to_vec();
    let mut val = perm[a..a + b].to_vec();
    let mut test = perm[a + b..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitMasks { train, val, test })
}

/// Anything that can answer "is node i an anomaly?".
pub trait LabelSource {
    fn num_nodes(&self) -> usize;
    fn label(&self, node: usize) -> u8;
}

impl<T: Scalar> LabelSource for AttributedGraph<T> {
    fn num_nodes(&self) -> usize {
        AttributedGraph::num_nodes(self)
    }

    fn label(&self, node: usize) -> u8 {
        self.labels().expect("graph carries labels")[node]
    }
}

/// Ground-truth labels behind an access log.
///
/// Every read is recorded together with whether [`LabelVault::unseal`] had
/// been called yet, so tests can prove evaluation labels stay unread until
/// final scoring.
#[derive(Debug)]
pub struct LabelVault {
    labels: Vec<u8>,
    log: Mutex<(bool, Vec<(usize, bool)>)>,
}

impl LabelVault {
    pub fn new(labels: Vec<u8>) -> Self {
        LabelVault {
            labels,
            log: Mutex::new((false, Vec::new())),
        }
    }

    /// Marks the start of final metric computation.
    pub fn unseal(&self) {
        self.log.lock().expect("vault lock").0 = true;
    }

    /// `(node, read_after_unseal)` for every access so far, in order.
    pub fn accesses(&self) -> Vec<(usize, bool)> {
        self.log.lock().expect("vault lock").1.clone()
    }
}

impl LabelSource for LabelVault {
    fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, node: usize) -> u8 {
        let mut log = self.log.lock().expect("vault lock");
        let unsealed = log.0;
        log.1.push((node, unsealed));
        self.labels[node]
    }
}

/// Draws `k` anomalies uniformly without replacement from the training mask.
/// Only training-mask labels are read. Returned indices are ascending.
pub fn sample_few_shot<L: LabelSource + ?Sized>(
    labels: &L,
    masks: &SplitMasks,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = masks.train.iter().copied().filter(|&i| labels.label(i) == 1).collect();
    if k == 0 || eligible.len() < k {
        return Err(arg_err(format!(
            "requested {k} shots but the training mask holds {} anomalies",
            eligible.len()
        )));
    }
    let mut rng = stream(seed, Stream::FewShot);
    let mut picked: Vec<usize> = index::sample(&mut rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// A labeled source graph and a target graph with full ground truth, before
/// any split or shot sampling.
#[derive(Debug, Clone)]
pub struct DatasetPair<T> {
    pub source: AttributedGraph<T>,
    pub target: AttributedGraph<T>,
}

impl<T: Scalar> DatasetPair<T> {
    pub fn load(source_dir: &Path, target_dir: &Path) -> Result<(Self, DatasetDescriptor, DatasetDescriptor)> {
        let (source, sd) = load_dataset(source_dir)?;
        let (target, td) = load_dataset(target_dir)?;
        Ok((DatasetPair { source, target }, sd, td))
    }
}

/// What training sees: the labeled source, the label-free target, its
/// split, and the indices of the K labeled target anomalies.
#[derive(Debug, Clone)]
pub struct DomainBundle<T> {
    pub source: AttributedGraph<T>,
    pub target: AttributedGraph<T>,
    pub masks: SplitMasks,
    pub shots: Vec<usize>,
}

impl<T: Scalar> DomainBundle<T> {
    /// Strips the target labels; `shots` must be anomalies from the train mask.
    pub fn new(source: AttributedGraph<T>, target: &AttributedGraph<T>, masks: SplitMasks, shots: Vec<usize>) -> Result<Self> {
        if source.labels().is_none() {
            return Err(arg_err("source graph must be fully labeled"));
        }
        if masks.num_nodes() != target.num_nodes() {
            return Err(arg_err("split does not cover the target graph"));
        }
        if let Some(s) = shots.iter().find(|s| masks.train.binary_search(s).is_err()) {
            return Err(arg_err(format!("shot node {s} is outside the training mask")));
        }
        Ok(DomainBundle {
            source,
            target: target.without_labels(),
            masks,
            shots,
        })
    }

    pub fn source_labels(&self) -> &[u8] {
        self.source.labels().expect("checked at construction")
    }

    /// Target training nodes with their working labels: the K shots are
    /// anomalies, every other training node is treated as normal.
    pub fn target_supervision(&self) -> Vec<(usize, u8)> {
        self.masks
            .train
            .iter()
            .map(|&i| (i, u8::from(self.shots.binary_search(&i).is_ok())))
            .collect()
    }

    /// Training nodes without a ground-truth label: the pseudo-label pool.
    pub fn unlabeled_train(&self) -> Vec<usize> {
        self.masks
            .train
            .iter()
            .copied()
            .filter(|i| self.shots.binary_search(i).is_err())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticPairConfig {
    pub nodes: usize,
    pub blocks: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub source_dim: usize,
    pub target_dim: usize,
    /// Spread of the block means around the origin.
    pub mean_scale: f64,
    /// Per-attribute noise around a node's block mean.
    pub noise: f64,
    /// Target block means are `shift_scale · μ + shift_offset` (coordinatewise).
    pub shift_scale: f64,
    pub shift_offset: f64,
    pub anomaly_fraction: f64,
    pub clique_size: usize,
    /// Per-attribute displacement of contextual anomalies, in units of `noise`.
    pub contextual_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticPairConfig {
    fn default() -> Self {
        SyntheticPairConfig {
            nodes: 400,
            blocks: 3,
            p_intra: 0.03,
            p_inter: 0.002,
            source_dim: 24,
            target_dim: 32,
            mean_scale: 1.0,
            noise: 0.5,
            shift_scale: 1.5,
            shift_offset: 0.5,
            anomaly_fraction: 0.05,
            clique_size: 10,
            contextual_shift: 1.5,
            seed: 0,
        }
    }
}

impl SyntheticPairConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_intra) || !prob(self.p_inter) {
            return Err(arg_err(format!(
                "edge probabilities ({}, {}) must lie in [0, 1]",
                self.p_intra, self.p_inter
            )));
        }
        if self.blocks == 0 || self.blocks > self.nodes {
            return Err(arg_err("block count must be in 1..=nodes"));
        }
        if self.nodes < 5 || self.source_dim == 0 || self.target_dim == 0 {
            return Err(arg_err("need at least 5 nodes and positive attribute dimensions"));
        }
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction <= 0.2) {
            return Err(arg_err(format!("anomaly fraction {} outside (0, 0.2]", self.anomaly_fraction)));
        }
        let anomalies = self.anomaly_count();
        if anomalies < 2 {
            return Err(arg_err("anomaly fraction too small to inject both mechanisms"));
        }
        if self.clique_size < 2 {
            return Err(arg_err("clique size must be at least 2"));
        }
        if self.noise.is_nan() || self.noise <= 0.0 || self.mean_scale.is_nan() || self.mean_scale < 0.0 {
            return Err(arg_err("noise must be positive and mean scale nonnegative"));
        }
        Ok(())
    }

    pub fn anomaly_count(&self) -> usize {
        (self.anomaly_fraction * self.nodes as f64).round() as usize
    }
}

/// Output of [`gen_synthetic_pair`]: graphs plus which mechanism produced
/// each anomaly.
#[derive(Debug, Clone)]
pub struct SyntheticPair<T> {
    pub pair: DatasetPair<T>,
    pub source_desc: DatasetDescriptor,
    pub target_desc: DatasetDescriptor,
    pub source_structural: Vec<usize>,
    pub target_structural: Vec<usize>,
    pub source_blocks: Vec<usize>,
    pub target_blocks: Vec<usize>,
}

struct GeneratedGraph<T> {
    graph: AttributedGraph<T>,
    blocks: Vec<usize>,
    structural: Vec<usize>,
}

fn generate_graph<T: Scalar, R: Rng>(
    cfg: &SyntheticPairConfig,
    block_means: &Array2<f64>,
    rng: &mut R,
) -> Result<GeneratedGraph<T>> {
    let n = cfg.nodes;
    let d = block_means.ncols();
    let blocks: Vec<usize> = (0..n).map(|i| i % cfg.blocks).collect::<Vec<_>>();
    let mut blocks = blocks;
    blocks.shuffle(rng);

    let mut edges: Vec<Edge> = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if blocks[u] == blocks[v] { cfg.p_intra } else { cfg.p_inter };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise).map_err(|e| arg_err(e.to_string()))?;
    let mut features = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            features[[i, j]] = block_means[[blocks[i], j]] + noise.sample(rng);
        }
    }

    let total = cfg.anomaly_count();
    let chosen = index::sample(rng, n, total).into_vec();
    let n_struct = total / 2;
    let structural: Vec<usize> = chosen[..n_struct].to_vec();
    let contextual: Vec<usize> = chosen[n_struct..].to_vec();

    // structural: dense cliques; a trailing singleton joins the previous group
    let mut groups: Vec<Vec<usize>> = structural.chunks(cfg.clique_size).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        let last = groups.pop().expect("non-empty");
        groups.last_mut().expect("non-empty").extend(last);
    }
    for g in &groups {
        for (a, &u) in g.iter().enumerate() {
            for &v in &g[a + 1..] {
                edges.push((u.min(v), u.max(v)));
            }
        }
    }

    // contextual: attributes redrawn around a displaced mean
    let shift = cfg.contextual_shift * cfg.noise;
    for &i in &contextual {
        for j in 0..d {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            features[[i, j]] = block_means[[blocks[i], j]] + sign * shift + noise.sample(rng);
        }
    }

    let mut labels = vec![0u8; n];
    for &i in &chosen {
        labels[i] = 1;
    }
    let graph = AttributedGraph::new(GraphParts {
        num_nodes: n,
        edges,
        features: features.mapv(T::lit),
        labels: Some(labels),
    })?;
    let mut structural = structural;
    structural.sort_unstable();
    Ok(GeneratedGraph {
        graph,
        blocks,
        structural,
    })
}

/// Two stochastic-block-model graphs whose block means are related by an
/// affine domain shift, each with injected structural and contextual
/// anomalies. Fully determined by `cfg.seed`.
pub fn gen_synthetic_pair<T: Scalar>(cfg: &SyntheticPairConfig) -> Result<SyntheticPair<T>> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Stream::Synthetic);
    let means = Normal::new(0.0, cfg.mean_scale.max(f64::MIN_POSITIVE)).map_err(|e| arg_err(e.to_string()))?;
    let source_means = Array2::from_shape_simple_fn((cfg.blocks, cfg.source_dim), || means.sample(&mut rng));
    // Target attribute j reuses source attribute j (wrapping when the target
    // is wider), then the affine shift is applied.
    let target_means = Array2::from_shape_fn((cfg.blocks, cfg.target_dim), |(b, j)| {
        cfg.shift_scale * source_means[[b, j % cfg.source_dim]] + cfg.shift_offset
    });
    let src = generate_graph::<T, _>(cfg, &source_means, &mut rng)?;
    let tgt = generate_graph::<T, _>(cfg, &target_means, &mut rng)?;
    Ok(SyntheticPair {
        source_desc: DatasetDescriptor::describe("synthetic-source", &src.graph),
        target_desc: DatasetDescriptor::describe("synthetic-target", &tgt.graph),
        pair: DatasetPair {
            source: src.graph,
            target: tgt.graph,
        },
        source_structural: src.structural,
        target_structural: tgt.structural,
        source_blocks: src.blocks,
        target_blocks: tgt.blocks,
    })
}
