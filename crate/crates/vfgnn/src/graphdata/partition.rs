use serde::{Deserialize, Serialize};

use super::{DataError, Graph};
use crate::diffcore::SeedStream;

/// Vertical split of a graph among clients: disjoint feature-column slices
/// whose union is all columns, and disjoint edge subsets whose union is all
/// edges. Every client sees all node identifiers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerticalPartition {
    pub n_clients: usize,
    pub client_feature_slices: Vec<Vec<usize>>,
    pub client_edges: Vec<Vec<usize>>,
}

/// Splits feature columns into contiguous near-equal slices and assigns
/// edges uniformly at random (seeded) to clients.
pub fn partition_vertical(
    g: &Graph,
    n_clients: usize,
    seed: u64,
) -> Result<VerticalPartition, DataError> {
    let d = g.feature_dim();
    if n_clients < 2 {
        return Err(DataError::Config(format!(
            "need at least 2 clients, got {n_clients}"
        )));
    }
    if n_clients > d {
        return Err(DataError::Config(format!(
            "{n_clients} clients cannot split {d} feature columns"
        )));
    }

    let base = d / n_clients;
    let extra = d % n_clients;
    let mut slices = Vec::with_capacity(n_clients);
    let mut start = 0;
    for c in 0..n_clients {
        let width = base + usize::from(c < extra);
        slices.push((start..start + width).collect());
        start += width;
    }

    let mut rng = SeedStream::new(SeedStream::derive(seed, "edge-partition"));
    let mut client_edges = vec![Vec::new(); n_clients];
    for e in 0..g.edges.len() {
        client_edges[rng.below(n_clients)].push(e);
    }

    Ok(VerticalPartition {
        n_clients,
        client_feature_slices: slices,
        client_edges,
    })
}
