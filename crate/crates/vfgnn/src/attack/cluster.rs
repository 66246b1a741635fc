use crate::diffcore::{SeedStream, Tensor};

use super::AttackError;

/// Lloyd's algorithm from seeded random-row initialization.
/// Returns per-point assignments and the final inertia.
pub fn kmeans(data: &Tensor, k: usize, max_iter: usize, rng: &mut SeedStream) -> (Vec<usize>, f64) {
    let n = data.rows();
    let d = data.cols();
    debug_assert!(k >= 1 && k <= n);

    // Distinct initial centers drawn from the data points.
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    while chosen.len() < k {
        let c = rng.below(n);
        if !chosen.contains(&c) {
            chosen.push(c);
        }
    }
    let mut centers: Vec<Vec<f64>> = chosen.iter().map(|&i| data.row(i).to_vec()).collect();

    let mut assign = vec![0usize; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for i in 0..n {
            let row = data.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dist: f64 = row
                    .iter()
                    .zip(center.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at a random point.
                centers[c] = data.row(rng.below(n)).to_vec();
                changed = true;
            } else {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centers[c] = sums[c].clone();
            }
        }
        if !changed {
            break;
        }
    }

    let inertia: f64 = (0..n)
        .map(|i| {
            data.row(i)
                .iter()
                .zip(centers[assign[i]].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    (assign, inertia)
}

/// Mean silhouette coefficient under Euclidean distance. Points in singleton
/// clusters score 0.
pub fn mean_silhouette(data: &Tensor, assign: &[usize], k: usize) -> f64 {
    let n = data.rows();
    if n == 0 {
        return 0.0;
    }
    let counts = {
        let mut c = vec![0usize; k];
        for &a in assign {
            c[a] += 1;
        }
        c
    };
    let mut total = 0.0;
    let mut cluster_dist = vec![0.0f64; k];
    for i in 0..n {
        cluster_dist.iter_mut().for_each(|v| *v = 0.0);
        let ri = data.row(i);
        for j in 0..n {
            if i == j {
                continue;
            }
            let dist: f64 = ri
                .iter()
                .zip(data.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            cluster_dist[assign[j]] += dist;
        }
        let own = assign[i];
        if counts[own] <= 1 {
            continue; // silhouette 0
        }
        let a = cluster_dist[own] / (counts[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c != own && counts[c] > 0 {
                b = b.min(cluster_dist[c] / counts[c] as f64);
            }
        }
        if b.is_finite() {
            let denom = a.max(b);
            if denom > 0.0 {
                total += (b - a) / denom;
            }
        }
    }
    total / n as f64
}

/// Estimates the number of classes from node embeddings: k-means over
/// k ∈ [2, 16] with 10 seeded restarts each, keeping the restart with the
/// lowest inertia, and returning the k with the best mean silhouette score.
pub fn estimate_num_classes(embeddings: &Tensor, seed: u64) -> Result<usize, AttackError> {
    let n = embeddings.rows();
    let mut distinct: Vec<&[f64]> = (0..n).map(|i| embeddings.row(i)).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(AttackError::Estimation(format!(
            "need at least 3 distinct embedding rows, got {}",
            distinct.len()
        )));
    }

    let k_max = 16.min(distinct.len() - 1).max(2);
    let mut best_k = 2;
    let mut best_score = f64::NEG_INFINITY;
    for k in 2..=k_max {
        let mut rng = SeedStream::new(SeedStream::derive(seed, &format!("kmeans/{k}")));
        let mut best_assign: Option<(Vec<usize>, f64)> = None;
        for _ in 0..10 {
            let (assign, inertia) = kmeans(embeddings, k, 50, &mut rng);
            if best_assign.as_ref().is_none_or(|(_, bi)| inertia < *bi) {
                best_assign = Some((assign, inertia));
            }
        }
        let (assign, _) = best_assign.expect("at least one restart");
        let score = mean_silhouette(embeddings, &assign, k);
        if score > best_score {
            best_score = score;
            best_k = k;
        }
    }
    Ok(best_k)
}
