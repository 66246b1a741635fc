//! Citation-graph loading, adjacency normalization, vertical partitioning,
//! and synthetic graph generation.
//!
//! Datasets use a two-file text format: a *content* file with one node per
//! line (`node_id<TAB>f_1…f_d<TAB>label_string`) and a *cites* file with one
//! undirected edge per line (`citing<TAB>cited`). Files ending in `.gz` are
//! decompressed transparently. A dataset manifest ties the two together:
//!
//! ```json
//! {"name": "cora", "content": "cora/cora.content.gz", "cites": "cora/cora.cites.gz"}
//! ```

mod loader;
mod partition;
mod synth;

pub use loader::{load_manifest, load_planetoid, write_graph, DatasetManifest};
pub use partition::{partition_vertical, VerticalPartition};
pub use synth::synth_sbm;

use thiserror::Error;

use crate::diffcore::{SparseMatrix, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Invalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub fn is_config(&self) -> bool {
        matches!(self, DataError::Config(_))
    }
}

/// Undirected graph for transductive node classification.
///
/// Edges are stored once with `u < v`, without self-loops or duplicates.
#[derive(Debug, Clone)]
pub struct Graph {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub train_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
    /// Node names as found in the source files ("n0", paper ids, ...).
    pub node_names: Vec<String>,
    /// Label strings in first-appearance order; `labels` indexes into this.
    pub label_names: Vec<String>,
}

impl Graph {
    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn train_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes).filter(|&v| self.train_mask[v]).collect()
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes).filter(|&v| self.test_mask[v]).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.features.rows() != self.n_nodes
            || self.labels.len() != self.n_nodes
            || self.train_mask.len() != self.n_nodes
            || self.test_mask.len() != self.n_nodes
        {
            return Err(DataError::Invalid("per-node arrays disagree on length".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &(u, v) in &self.edges {
            if u == v {
                return Err(DataError::Invalid(format!("self-loop stored at node {u}")));
            }
            if u >= self.n_nodes || v >= self.n_nodes {
                return Err(DataError::Invalid(format!("edge ({u},{v}) out of bounds")));
            }
            let key = (u.min(v), u.max(v));
            if !seen.insert(key) {
                return Err(DataError::Invalid(format!("duplicate edge ({u},{v})")));
            }
        }
        for (v, &l) in self.labels.iter().enumerate() {
            if l >= self.n_classes {
                return Err(DataError::Invalid(format!("label {l} at node {v} out of range")));
            }
        }
        if self
            .train_mask
            .iter()
            .zip(&self.test_mask)
            .any(|(&a, &b)| a && b)
        {
            return Err(DataError::Invalid("train and test masks overlap".into()));
        }
        Ok(())
    }

    /// Applies a seeded train/test split with the given train fraction.
    pub fn split_seeded(&mut self, train_fraction: f64, seed: u64) {
        let mut order: Vec<usize> = (0..self.n_nodes).collect();
        let mut rng = crate::diffcore::SeedStream::new(seed);
        rng.shuffle(&mut order);
        let n_train = ((self.n_nodes as f64) * train_fraction).round() as usize;
        self.train_mask = vec![false; self.n_nodes];
        self.test_mask = vec![false; self.n_nodes];
        for (i, &v) in order.iter().enumerate() {
            if i < n_train {
                self.train_mask[v] = true;
            } else {
                self.test_mask[v] = true;
            }
        }
    }
}

/// Normalization scheme for an adjacency structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyScheme {
    /// Symmetric normalization `1/√(d_v·d_u)` with self-loops.
    GcnSym,
    /// Row-stochastic mean over the closed neighborhood.
    RowMean,
}

/// Sparse normalized adjacency over the closed neighborhoods of an edge
/// subset, plus the raw directed pair list (with self-loops) for
/// attention-style layers.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    pub matrix: SparseMatrix,
    pub scheme: AdjacencyScheme,
    /// Directed (src, dst) pairs covering u∈N(v)∪{v} for every v.
    pub directed_pairs: Vec<(usize, usize)>,
}

/// Builds the normalized adjacency for a subset of a graph's edges.
/// Self-loops are added during normalization, never stored in the graph;
/// degrees are computed from the subset only.
pub fn normalize_adjacency(
    g: &Graph,
    edge_subset: &[usize],
    scheme: AdjacencyScheme,
) -> Result<NormalizedAdjacency, DataError> {
    let n = g.n_nodes;
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &e in edge_subset {
        let (u, v) = *g
            .edges
            .get(e)
            .ok_or_else(|| DataError::Invalid(format!("edge index {e} out of range")))?;
        neighbors[u].push(v);
        neighbors[v].push(u);
    }
    for (v, nb) in neighbors.iter_mut().enumerate() {
        nb.push(v); // self-loop
        nb.sort_unstable();
        nb.dedup();
    }
    let degree: Vec<usize> = neighbors.iter().map(Vec::len).collect();

    let mut triplets = Vec::new();
    let mut pairs = Vec::new();
    for v in 0..n {
        for &u in &neighbors[v] {
            let w = match scheme {
                AdjacencyScheme::GcnSym => 1.0 / ((degree[v] as f64) * (degree[u] as f64)).sqrt(),
                AdjacencyScheme::RowMean => 1.0 / degree[v] as f64,
            };
            triplets.push((v, u, w));
            pairs.push((u, v));
        }
    }
    let matrix = SparseMatrix::from_triplets(n, n, &triplets)
        .map_err(|e| DataError::Invalid(format!("adjacency build: {e}")))?;
    Ok(NormalizedAdjacency {
        matrix,
        scheme,
        directed_pairs: pairs,
    })
}
