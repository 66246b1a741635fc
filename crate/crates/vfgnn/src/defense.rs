//! Server-side gradient-perturbation defenses, applied to the per-client
//! embedding gradients before they cross the trust boundary.

use serde::{Deserialize, Serialize};

use crate::diffcore::{SeedStream, Tensor};

/// Which transform the server applies to outgoing embedding gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    #[default]
    None,
    /// Per-node-row L2 clipping to threshold τ.
    Clip { tau: f64 },
    /// Elementwise additive Laplace(0, b) noise, seeded.
    Laplace { b: f64, seed: u64 },
    /// Keep the ⌈ρ·count⌉ largest-magnitude entries, zero the rest.
    Compress { rho: f64 },
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            DefenseConfig::None => Ok(()),
            DefenseConfig::Clip { tau } if tau > 0.0 => Ok(()),
            DefenseConfig::Clip { tau } => Err(format!("clip threshold must be positive, got {tau}")),
            DefenseConfig::Laplace { b, .. } if b >= 0.0 => Ok(()),
            DefenseConfig::Laplace { b, .. } => Err(format!("noise scale must be nonnegative, got {b}")),
            DefenseConfig::Compress { rho } if rho > 0.0 && rho <= 1.0 => Ok(()),
            DefenseConfig::Compress { rho } => Err(format!("keep fraction must be in (0,1], got {rho}")),
        }
    }

    /// Applies the configured transform to one released gradient tensor.
    /// The `epoch`/`client` indices derive the per-release noise stream.
    pub fn apply(&self, g: &Tensor, epoch: usize, client: usize) -> Tensor {
        match *self {
            DefenseConfig::None => g.clone(),
            DefenseConfig::Clip { tau } => clip(g, tau),
            DefenseConfig::Laplace { b, seed } => {
                let streams = SeedStream::derive(seed, &format!("laplace/{epoch}/{client}"));
                laplace(g, b, streams)
            }
            DefenseConfig::Compress { rho } => compress(g, rho),
        }
    }
}

/// Scales each row `r` by `min(1, τ/‖r‖₂)`; zero rows pass through. A one-
/// ulp relative slack on the comparison makes the transform exactly
/// idempotent despite the rounding of the rescale.
pub fn clip(g: &Tensor, tau: f64) -> Tensor {
    let mut out = g.clone();
    let cols = g.cols();
    for r in 0..g.rows() {
        let norm = g.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > tau * (1.0 + 1e-12) {
            let scale = tau / norm;
            for v in &mut out.data_mut()[r * cols..(r + 1) * cols] {
                *v *= scale;
            }
        }
    }
    out
}

/// Adds elementwise Laplace(0, b) noise from a seeded inverse-CDF sampler.
pub fn laplace(g: &Tensor, b: f64, seed: u64) -> Tensor {
    if b == 0.0 {
        return g.clone();
    }
    let mut rng = SeedStream::new(seed);
    g.map(|v| v + rng.laplace(b))
}

/// Keeps the `⌈ρ·count⌉` entries of largest absolute value over the whole
/// tensor, zeroing the rest; ties keep the lower flat index first.
pub fn compress(g: &Tensor, rho: f64) -> Tensor {
    let count = g.len();
    if count == 0 {
        return g.clone();
    }
    let keep = ((rho * count as f64).ceil() as usize).min(count);
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| {
        g.data()[b]
            .abs()
            .partial_cmp(&g.data()[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = Tensor::zeros(g.rows(), g.cols());
    for &i in order.iter().take(keep) {
        out.data_mut()[i] = g.data()[i];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_leaves_small_rows_alone() {
        let g = Tensor::from_rows(&[vec![0.3, 0.4]]).unwrap(); // norm 0.5
        assert_eq!(clip(&g, 1.0), g);
    }

    #[test]
    fn clip_rescales_large_rows() {
        let g = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap(); // norm 5
        let c = clip(&g, 1.0);
        assert!((c.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((c.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_zero_row_unchanged() {
        let g = Tensor::zeros(2, 3);
        assert_eq!(clip(&g, 0.5), g);
    }

    #[test]
    fn clip_is_idempotent_and_bounded() {
        let mut s = SeedStream::new(3);
        let g = Tensor::new(5, 4, (0..20).map(|_| s.uniform(-2.0, 2.0)).collect()).unwrap();
        let once = clip(&g, 0.7);
        let twice = clip(&once, 0.7);
        assert!(once.max_abs_diff(&twice) == 0.0);
        for r in 0..5 {
            let norm = once.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 0.7 + 1e-12, "row {r}: {norm}");
        }
    }

    #[test]
    fn laplace_zero_scale_is_identity() {
        let g = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        assert_eq!(laplace(&g, 0.0, 9), g);
    }

    #[test]
    fn laplace_same_seed_same_field() {
        let g = Tensor::zeros(3, 3);
        let a = laplace(&g, 0.5, 11);
        let b = laplace(&g, 0.5, 11);
        assert_eq!(a, b);
        let c = laplace(&g, 0.5, 12);
        assert!(a.max_abs_diff(&c) > 0.0);
    }

    #[test]
    fn laplace_tiny_scale_converges_to_identity() {
        let mut s = SeedStream::new(5);
        let g = Tensor::new(4, 4, (0..16).map(|_| s.uniform(-1.0, 1.0)).collect()).unwrap();
        let noisy = laplace(&g, 1e-12, 7);
        assert!(noisy.max_abs_diff(&g) <= 1e-9);
    }

    #[test]
    fn compress_keep_all_is_identity() {
        let g = Tensor::from_rows(&[vec![1.0, -5.0, 2.0, 0.0]]).unwrap();
        assert_eq!(compress(&g, 1.0), g);
    }

    #[test]
    fn compress_top1_by_magnitude() {
        let g = Tensor::from_rows(&[vec![1.0, -5.0, 2.0, 0.0]]).unwrap();
        let c = compress(&g, 0.25);
        assert_eq!(c.data(), &[0.0, -5.0, 0.0, 0.0]);
    }

    #[test]
    fn compress_counts_and_idempotence() {
        let mut s = SeedStream::new(13);
        let g = Tensor::new(4, 5, (0..20).map(|_| s.uniform(0.1, 1.0)).collect()).unwrap();
        let c = compress(&g, 0.3);
        let nonzeros = c.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzeros, (0.3f64 * 20.0).ceil() as usize);
        assert!(compress(&c, 0.3).max_abs_diff(&c) == 0.0);
    }

    #[test]
    fn compress_tie_break_keeps_lower_index() {
        let g = Tensor::from_rows(&[vec![2.0, -2.0, 1.0, 2.0]]).unwrap();
        let c = compress(&g, 0.5); // keep 2 of 4
        assert_eq!(c.data(), &[2.0, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn validation_rules() {
        assert!(DefenseConfig::Clip { tau: 0.0 }.validate().is_err());
        assert!(DefenseConfig::Laplace { b: -1.0, seed: 0 }.validate().is_err());
        assert!(DefenseConfig::Compress { rho: 0.0 }.validate().is_err());
        assert!(DefenseConfig::Compress { rho: 1.0 }.validate().is_ok());
    }
}
