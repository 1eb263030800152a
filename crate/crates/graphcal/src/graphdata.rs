//! Graph representation, adjacency normalization, dataset ingestion,
//! deterministic splits and synthetic graph generation.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, SeededRng};

/// Sparse n x n matrix in compressed-row form. Column indices are sorted
/// ascending within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Build a symmetric CSR matrix from an undirected edge list, each edge
    /// stored once. Every edge gets value 1.0 in both directions.
    pub fn from_undirected_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidInput(format!(
                    "edge ({u}, {v}) references node >= {n}"
                )));
            }
            rows[u].push(v);
            rows[v].push(u);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for cols in rows.iter_mut() {
            cols.sort_unstable();
            col_idx.extend_from_slice(cols);
            row_ptr.push(col_idx.len());
        }
        let values = vec![1.0; col_idx.len()];
        Ok(CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Stored value at (i, j), or 0.0 when the entry is absent.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let start = self.row_ptr[i];
        let end = self.row_ptr[i + 1];
        match self.col_idx[start..end].binary_search(&j) {
            Ok(pos) => self.values[start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let start = self.row_ptr[i];
        let end = self.row_ptr[i + 1];
        self.col_idx[start..end]
            .iter()
            .zip(&self.values[start..end])
            .map(|(&j, &v)| (j, v))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        for i in 0..self.n {
            for (j, v) in self.row_entries(i) {
                if (self.get(j, i) - v).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row_entries(i) {
                m.set(i, j, v);
            }
        }
        m
    }
}

/// The symmetric normalized adjacency D^{-1/2} (A + I) D^{-1/2}.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency(pub CsrMatrix);

impl std::ops::Deref for NormalizedAdjacency {
    type Target = CsrMatrix;
    fn deref(&self) -> &CsrMatrix {
        &self.0
    }
}

/// An attributed graph with features, labels and a symmetric adjacency.
/// Self-loops are never stored; they are added only during normalization.
#[derive(Debug, Clone)]
pub struct Graph {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub adjacency: CsrMatrix,
}

impl Graph {
    /// Validates every invariant and builds the symmetric adjacency. Edges
    /// are canonicalized to (min, max); duplicates and self-loops are errors.
    pub fn new(
        features: DenseMatrix,
        labels: Vec<usize>,
        edges: Vec<(usize, usize)>,
        c: usize,
    ) -> Result<Self> {
        let n = features.rows;
        let d = features.cols;
        if labels.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} feature rows",
                labels.len(),
                n
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::InvalidInput(format!(
                "label {l} at node {i} out of range [0, {c})"
            )));
        }
        if !features.all_finite() {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        let mut canonical = Vec::with_capacity(edges.len());
        let mut seen = BTreeSet::new();
        for &(u, v) in &edges {
            if u == v {
                return Err(Error::InvalidInput(format!("self-loop at node {u}")));
            }
            if u >= n || v >= n {
                return Err(Error::InvalidInput(format!(
                    "edge ({u}, {v}) references node >= {n}"
                )));
            }
            let e = (u.min(v), u.max(v));
            if !seen.insert(e) {
                return Err(Error::InvalidInput(format!(
                    "duplicate edge ({}, {})",
                    e.0, e.1
                )));
            }
            canonical.push(e);
        }
        canonical.sort_unstable();
        let adjacency = CsrMatrix::from_undirected_edges(n, &canonical)?;
        Ok(Graph {
            n,
            d,
            c,
            features,
            labels,
            edges: canonical,
            adjacency,
        })
    }
}

/// Disjoint train/valid/test node sets. Vectors are sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMasks {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub labels_per_class: usize,
}

/// Contextual stochastic-block-model fixture. Class k's feature mean is
/// `class_mean_separation` along axis k; edges appear with probability
/// `intra_edge_prob` inside a class and `inter_edge_prob` across classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub nodes_per_class: usize,
    pub intra_edge_prob: f64,
    pub inter_edge_prob: f64,
    pub feature_dim: usize,
    pub class_mean_separation: f64,
    pub feature_noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.nodes_per_class == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidInput("all counts must be positive".into()));
        }
        for (name, p) in [
            ("intra_edge_prob", self.intra_edge_prob),
            ("inter_edge_prob", self.inter_edge_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("{name} = {p} outside [0,1]")));
            }
        }
        if self.feature_dim < self.classes {
            return Err(Error::InvalidInput(format!(
                "feature_dim {} must be >= classes {} for axis-aligned class means",
                self.feature_dim, self.classes
            )));
        }
        if self.feature_noise_std < 0.0 {
            return Err(Error::InvalidInput("feature_noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I. The output
/// pattern is the input pattern plus the full diagonal.
pub fn normalize_adjacency(adjacency: &CsrMatrix) -> Result<NormalizedAdjacency> {
    if !adjacency.is_symmetric(0.0) {
        return Err(Error::InvalidInput("adjacency is not symmetric".into()));
    }
    if adjacency.values.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("negative edge weight".into()));
    }
    let n = adjacency.n;
    let mut degree = vec![1.0f64; n]; // self-loop contributes 1
    for i in 0..n {
        for (_, v) in adjacency.row_entries(i) {
            degree[i] += v;
        }
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|&d| 1.0 / d.sqrt()).collect();

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for i in 0..n {
        let mut diag_emitted = false;
        for (j, v) in adjacency.row_entries(i) {
            if !diag_emitted && j >= i {
                let diag = adjacency.get(i, i) + 1.0;
                col_idx.push(i);
                values.push(diag * inv_sqrt[i] * inv_sqrt[i]);
                diag_emitted = true;
                if j == i {
                    continue; // folded into the diagonal entry above
                }
            }
            col_idx.push(j);
            values.push(v * inv_sqrt[i] * inv_sqrt[j]);
        }
        if !diag_emitted {
            let diag = adjacency.get(i, i) + 1.0;
            col_idx.push(i);
            values.push(diag * inv_sqrt[i] * inv_sqrt[i]);
        }
        row_ptr.push(col_idx.len());
    }
    Ok(NormalizedAdjacency(CsrMatrix {
        n,
        row_ptr,
        col_idx,
        values,
    }))
}

/// Deterministic synthetic graph from a [`SyntheticSpec`].
pub fn generate_csbm(spec: &SyntheticSpec) -> Result<Graph> {
    spec.validate()?;
    let n = spec.classes * spec.nodes_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / spec.nodes_per_class).collect();

    let root = SeededRng::new(spec.seed);
    let mut feat_rng = root.derive(1);
    let mut edge_rng = root.derive(2);

    let mut features = DenseMatrix::zeros(n, spec.feature_dim);
    for i in 0..n {
        let class = labels[i];
        let row = features.row_mut(i);
        for (j, x) in row.iter_mut().enumerate() {
            let mean = if j == class {
                spec.class_mean_separation
            } else {
                0.0
            };
            *x = mean + spec.feature_noise_std * feat_rng.standard_normal();
        }
    }

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] {
                spec.intra_edge_prob
            } else {
                spec.inter_edge_prob
            };
            if edge_rng.bernoulli(p) {
                edges.push((u, v));
            }
        }
    }
    Graph::new(features, labels, edges, spec.classes)
}

/// Deterministic per-seed split: `labels_per_class` train nodes sampled
/// uniformly per class, then valid/test sampled uniformly from the rest.
pub fn make_splits(
    graph: &Graph,
    labels_per_class: usize,
    n_valid: usize,
    n_test: usize,
    seed: u64,
) -> Result<SplitMasks> {
    let mut rng = SeededRng::new(seed).derive(10);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); graph.c];
    for (i, &l) in graph.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut train = Vec::with_capacity(labels_per_class * graph.c);
    for (class, mut ids) in by_class.into_iter().enumerate() {
        if ids.len() < labels_per_class {
            return Err(Error::Infeasible(format!(
                "class {class} has {} nodes, need {labels_per_class}",
                ids.len()
            )));
        }
        rng.shuffle(&mut ids);
        train.extend_from_slice(&ids[..labels_per_class]);
    }
    let in_train: BTreeSet<usize> = train.iter().copied().collect();
    let mut pool: Vec<usize> = (0..graph.n).filter(|i| !in_train.contains(i)).collect();
    if pool.len() < n_valid + n_test {
        return Err(Error::Infeasible(format!(
            "{} nodes left after training split, need {}",
            pool.len(),
            n_valid + n_test
        )));
    }
    rng.shuffle(&mut pool);
    let mut valid: Vec<usize> = pool[..n_valid].to_vec();
    let mut test: Vec<usize> = pool[n_valid..n_valid + n_test].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(SplitMasks {
        train,
        valid,
        test,
        labels_per_class,
    })
}

/// Split the test set into nodes with (V_F) and without (V_S) a labeled
/// training node among their 1-hop neighbors in the raw adjacency.
pub fn partition_test_nodes(graph: &Graph, splits: &SplitMasks) -> (Vec<usize>, Vec<usize>) {
    partition_by_train_adjacency(graph, &splits.train, &splits.test)
}

/// Same 1-hop rule for an arbitrary node set (used to partition validation
/// nodes during hyperparameter search).
pub fn partition_by_train_adjacency(
    graph: &Graph,
    train: &[usize],
    nodes: &[usize],
) -> (Vec<usize>, Vec<usize>) {
    let train_set: BTreeSet<usize> = train.iter().copied().collect();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for &t in nodes {
        let adjacent = graph
            .adjacency
            .row_entries(t)
            .any(|(j, _)| train_set.contains(&j));
        if adjacent {
            first.push(t);
        } else {
            second.push(t);
        }
    }
    (first, second)
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleMeta {
    n: usize,
    d: usize,
    c: usize,
    #[serde(default)]
    name: Option<String>,
}

/// Write a graph and its splits as a GraphBundle directory.
pub fn save_bundle(path: &Path, graph: &Graph, splits: &SplitMasks) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let meta = BundleMeta {
        n: graph.n,
        d: graph.d,
        c: graph.c,
        name: None,
    };
    let meta_path = path.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| Error::io(&meta_path, e))?;

    let feat_path = path.join("features.bin");
    let mut buf = Vec::with_capacity(16 + 4 * graph.n * graph.d);
    buf.extend_from_slice(&(graph.n as u64).to_le_bytes());
    buf.extend_from_slice(&(graph.d as u64).to_le_bytes());
    for &x in &graph.features.data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(&feat_path, buf).map_err(|e| Error::io(&feat_path, e))?;

    let labels_path = path.join("labels.txt");
    let labels: String = graph
        .labels
        .iter()
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&labels_path, labels).map_err(|e| Error::io(&labels_path, e))?;

    let edges_path = path.join("edges.txt");
    let mut edges = String::new();
    for &(u, v) in &graph.edges {
        edges.push_str(&format!("{u} {v}\n"));
    }
    fs::write(&edges_path, edges).map_err(|e| Error::io(&edges_path, e))?;

    let splits_path = path.join("splits.json");
    fs::write(&splits_path, serde_json::to_string_pretty(splits).unwrap())
        .map_err(|e| Error::io(&splits_path, e))?;
    Ok(())
}

/// Load a GraphBundle directory written by [`save_bundle`] (or the ingest
/// command). Every invariant of [`Graph`] is re-validated.
pub fn load_bundle(path: &Path) -> Result<(Graph, SplitMasks)> {
    let meta_path = path.join("meta.json");
    let meta_raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&meta_raw)
        .map_err(|e| Error::Malformed(format!("meta.json: {e}")))?;

    let feat_path = path.join("features.bin");
    let mut f = fs::File::open(&feat_path).map_err(|e| Error::io(&feat_path, e))?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header)
        .map_err(|e| Error::io(&feat_path, e))?;
    let rows = u64::from_le_bytes(header[..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(header[8..].try_into().unwrap()) as usize;
    if rows != meta.n || cols != meta.d {
        return Err(Error::DimensionMismatch(format!(
            "features.bin header {rows}x{cols} vs meta {}x{}",
            meta.n, meta.d
        )));
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)
        .map_err(|e| Error::io(&feat_path, e))?;
    if payload.len() != rows * cols * 4 {
        return Err(Error::Malformed(format!(
            "features.bin payload has {} bytes, expected {}",
            payload.len(),
            rows * cols * 4
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let features = DenseMatrix::from_vec(rows, cols, data)?;

    let labels_path = path.join("labels.txt");
    let labels_raw = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut labels = Vec::with_capacity(meta.n);
    for (lineno, line) in labels_raw.lines().enumerate() {
        let l: usize = line.trim().parse().map_err(|_| {
            Error::Malformed(format!("labels.txt line {}: {:?}", lineno + 1, line))
        })?;
        if l >= meta.c {
            return Err(Error::Malformed(format!(
                "labels.txt line {}: label {l} out of range [0, {})",
                lineno + 1,
                meta.c
            )));
        }
        labels.push(l);
    }
    if labels.len() != meta.n {
        return Err(Error::DimensionMismatch(format!(
            "labels.txt has {} lines, expected {}",
            labels.len(),
            meta.n
        )));
    }

    let edges_path = path.join("edges.txt");
    let edges_raw = fs::read_to_string(&edges_path).map_err(|e| Error::io(&edges_path, e))?;
    let mut edges = Vec::new();
    for (lineno, line) in edges_raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|x| x.parse().ok()).ok_or_else(|| {
                Error::Malformed(format!("edges.txt line {}: {:?}", lineno + 1, line))
            })
        };
        let u = parse(parts.next())?;
        let v = parse(parts.next())?;
        edges.push((u, v));
    }

    let splits_path = path.join("splits.json");
    let splits_raw = fs::read_to_string(&splits_path).map_err(|e| Error::io(&splits_path, e))?;
    let splits: SplitMasks = serde_json::from_str(&splits_raw)
        .map_err(|e| Error::Malformed(format!("splits.json: {e}")))?;

    let graph = Graph::new(features, labels, edges, meta.c)?;
    Ok((graph, splits))
}

/// Helper used in tests and by the ingest command: write a features.bin blob.
pub fn encode_features_f32(features: &DenseMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * features.data.len());
    buf.extend_from_slice(&(features.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(features.cols as u64).to_le_bytes());
    for &x in &features.data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf
}
