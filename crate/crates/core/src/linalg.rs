//! Small dense linear-algebra helpers shared by the engines and estimators.

use nalgebra::{DMatrix, DVector};

/// Sum of vectors by recursive halving, in ascending index order.
///
/// The association order depends only on `vectors.len()`, so the result is
/// reproducible regardless of how the inputs were produced.
pub fn pairwise_sum(vectors: &[DVector<f64>]) -> DVector<f64> {
    assert!(!vectors.is_empty(), "pairwise_sum of an empty slice");
    match vectors.len() {
        1 => vectors[0].clone(),
        2 => &vectors[0] + &vectors[1],
        len => {
            let mid = len / 2;
            pairwise_sum(&vectors[..mid]) + pairwise_sum(&vectors[mid..])
        }
    }
}

/// Pairwise mean: `pairwise_sum(vectors) / len`.
pub fn pairwise_mean(vectors: &[DVector<f64>]) -> DVector<f64> {
    pairwise_sum(vectors) / vectors.len() as f64
}

/// Outcome of a power iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct PowerIteration {
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration {
            max_iters: 100,
            tolerance: 1e-8,
        }
    }
}

impl PowerIteration {
    /// Largest absolute eigenvalue of a symmetric operator given by its action.
    ///
    /// Iterates `v <- Bv / |Bv|` and reports `|Bv|`, which converges to the
    /// spectral norm even when `+lambda` and `-lambda` are both dominant.
    pub fn spectral_norm<F>(&self, dim: usize, mut apply: F) -> PowerEstimate
    where
        F: FnMut(&DVector<f64>) -> DVector<f64>,
    {
        if dim == 0 {
            return PowerEstimate {
                value: 0.0,
                iterations: 0,
                converged: true,
            };
        }
        let mut v = start_vector(dim);
        let mut estimate = 0.0;
        for iter in 1..=self.max_iters {
            let w = apply(&v);
            let norm = w.norm();
            if norm == 0.0 || !norm.is_finite() {
                return PowerEstimate {
                    value: if norm.is_finite() { 0.0 } else { norm },
                    iterations: iter,
                    converged: norm.is_finite(),
                };
            }
            let change = (norm - estimate).abs();
            estimate = norm;
            v = w / norm;
            if change <= self.tolerance * norm {
                return PowerEstimate {
                    value: estimate,
                    iterations: iter,
                    converged: true,
                };
            }
        }
        PowerEstimate {
            value: estimate,
            iterations: self.max_iters,
            converged: false,
        }
    }

    pub fn matrix_norm(&self, m: &DMatrix<f64>) -> PowerEstimate {
        debug_assert_eq!(m.nrows(), m.ncols());
        self.spectral_norm(m.nrows(), |v| m * v)
    }
}

// Deterministic, generic start vector (not orthogonal to any coordinate axis).
fn start_vector(dim: usize) -> DVector<f64> {
    let v = DVector::from_fn(dim, |j, _| {
        let h = splitmix64(j as u64 ^ 0x5eed_5eed);
        0.5 + (h >> 11) as f64 / (1u64 << 53) as f64
    });
    let n = v.norm();
    v / n
}

/// SplitMix64 finalizer; used for cheap deterministic hashing of small keys.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_for_small_integers() {
        let vs: Vec<_> = (0..7)
            .map(|k| DVector::from_vec(vec![k as f64, 2.0 * k as f64]))
            .collect();
        let s = pairwise_sum(&vs);
        assert_eq!(s[0], 21.0);
        assert_eq!(s[1], 42.0);
    }

    #[test]
    fn power_iteration_on_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, -0.25]));
        let est = PowerIteration::default().matrix_norm(&m);
        assert!((est.value - 1.0).abs() < 1e-7, "{est:?}");
        assert!(est.converged);
    }

    #[test]
    fn power_iteration_handles_symmetric_pair() {
        // eigenvalues +2 and -2: iterate oscillates, norm still converges
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -2.0]);
        let est = PowerIteration::default().matrix_norm(&m);
        assert!((est.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_operator_has_zero_norm() {
        let m = DMatrix::<f64>::zeros(3, 3);
        let est = PowerIteration::default().matrix_norm(&m);
        assert_eq!(est.value, 0.0);
        assert!(est.converged);
    }
}
