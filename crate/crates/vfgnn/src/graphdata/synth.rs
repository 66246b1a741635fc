use super::{DataError, Graph};
use crate::diffcore::{SeedStream, Tensor};

/// Stochastic block model with class-conditioned Gaussian features.
///
/// Classes are balanced (remainder nodes go to the lowest classes); feature
/// vectors are unit-variance Gaussians whose mean is offset by 1.0 along the
/// dimension `class mod d`. A seeded 70/30 train/test split is applied.
pub fn synth_sbm(
    n_nodes: usize,
    n_classes: usize,
    p_in: f64,
    p_out: f64,
    d: usize,
    seed: u64,
) -> Result<Graph, DataError> {
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out >= p_in {
        return Err(DataError::Config(format!(
            "need 0 ≤ p_out < p_in ≤ 1, got p_in={p_in} p_out={p_out}"
        )));
    }
    if n_classes == 0 || n_nodes == 0 || d == 0 {
        return Err(DataError::Config("empty synthetic graph".into()));
    }

    let labels: Vec<usize> = (0..n_nodes).map(|v| v % n_classes).collect();

    let mut feat_rng = SeedStream::new(SeedStream::derive(seed, "sbm-features"));
    let mut features = Tensor::zeros(n_nodes, d);
    for v in 0..n_nodes {
        let offset_dim = labels[v] % d;
        for c in 0..d {
            let mean = if c == offset_dim { 1.0 } else { 0.0 };
            features.set(v, c, mean + feat_rng.gaussian());
        }
    }

    let mut edge_rng = SeedStream::new(SeedStream::derive(seed, "sbm-edges"));
    let mut edges = Vec::new();
    for u in 0..n_nodes {
        for v in (u + 1)..n_nodes {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if p > 0.0 && edge_rng.unit() < p {
                edges.push((u, v));
            }
        }
    }

    let mut graph = Graph {
        n_nodes,
        edges,
        features,
        labels,
        n_classes,
        train_mask: vec![false; n_nodes],
        test_mask: vec![false; n_nodes],
        node_names: (0..n_nodes).map(|v| format!("n{v}")).collect(),
        label_names: (0..n_classes).map(|c| format!("c{c}")).collect(),
    };
    graph.split_seeded(0.7, SeedStream::derive(seed, "sbm-split"));
    graph.validate()?;
    Ok(graph)
}
