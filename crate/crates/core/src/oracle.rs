//! Stochastic first-order oracle with keyed, order-independent Gaussian noise.
//!
//! The noise for a query is a pure function of `(seed, worker, iteration,
//! replica)`: the key is hashed into a ChaCha8 seed and the stream is turned
//! into standard normals with the Box-Muller transform
//! `z = sqrt(-2 ln u1) * (cos, sin)(2 pi u2)`, using 53-bit uniforms with
//! `u1` in `(0, 1]` and `u2` in `[0, 1)`.

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::splitmix64;
use crate::problem::ProblemInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    #[default]
    GaussianIsotropic,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub noise_kind: NoiseKind,
}

impl OracleConfig {
    pub fn gaussian(sigma: f64, seed: u64) -> Result<Self> {
        let cfg = OracleConfig {
            sigma,
            seed,
            noise_kind: NoiseKind::GaussianIsotropic,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn exact() -> Self {
        OracleConfig {
            sigma: 0.0,
            seed: 0,
            noise_kind: NoiseKind::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("oracle sigma must be finite and >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Root-mean-square noise norm actually injected.
    pub fn effective_sigma(&self) -> f64 {
        match self.noise_kind {
            NoiseKind::GaussianIsotropic => self.sigma,
            NoiseKind::None => 0.0,
        }
    }
}

/// Identifies a single noise draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QueryKey {
    pub worker: usize,
    pub iteration: u64,
    pub replica: u32,
}

impl QueryKey {
    pub fn new(worker: usize, iteration: u64) -> Self {
        QueryKey {
            worker,
            iteration,
            replica: 0,
        }
    }
}

fn key_rng(seed: u64, key: QueryKey) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ key.worker as u64);
    h = splitmix64(h ^ key.iteration);
    h = splitmix64(h ^ u64::from(key.replica));
    let mut bytes = [0u8; 32];
    let mut state = h;
    for chunk in bytes.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

/// `d` standard normal draws determined by `(seed, key)`.
pub fn standard_normals(seed: u64, key: QueryKey, d: usize) -> DVector<f64> {
    let mut rng = key_rng(seed, key);
    let mut out = DVector::zeros(d);
    let mut j = 0;
    while j < d {
        let u1 = ((rng.next_u64() >> 11) + 1) as f64 * TWO_POW_M53;
        let u2 = (rng.next_u64() >> 11) as f64 * TWO_POW_M53;
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        out[j] = r * c;
        if j + 1 < d {
            out[j + 1] = r * s;
        }
        j += 2;
    }
    out
}

/// The noise vector for `key`: isotropic Gaussian with `E|nu|^2 = sigma^2`.
pub fn noise(cfg: &OracleConfig, key: QueryKey, d: usize) -> DVector<f64> {
    let sigma = cfg.effective_sigma();
    if sigma == 0.0 || d == 0 {
        return DVector::zeros(d);
    }
    standard_normals(cfg.seed, key, d) * (sigma / (d as f64).sqrt())
}

/// Local gradient of worker `key.worker` at `x` plus keyed noise.
pub fn sample_gradient(
    p: &ProblemInstance,
    cfg: &OracleConfig,
    key: QueryKey,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut g = p.local_grad(key.worker, x)?;
    if cfg.effective_sigma() > 0.0 {
        g += noise(cfg, key, x.len());
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_draw() {
        let k = QueryKey {
            worker: 3,
            iteration: 17,
            replica: 2,
        };
        assert_eq!(standard_normals(9, k, 7), standard_normals(9, k, 7));
    }

    #[test]
    fn distinct_keys_differ() {
        let a = standard_normals(9, QueryKey::new(0, 1), 4);
        let b = standard_normals(9, QueryKey::new(1, 0), 4);
        let c = standard_normals(10, QueryKey::new(0, 1), 4);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn odd_dimension_prefix_matches_even() {
        let k = QueryKey::new(2, 5);
        let a = standard_normals(1, k, 5);
        let b = standard_normals(1, k, 6);
        assert_eq!(a.as_slice(), &b.as_slice()[..5]);
    }

    #[test]
    fn none_kind_is_silent() {
        let cfg = OracleConfig {
            sigma: 3.0,
            seed: 1,
            noise_kind: NoiseKind::None,
        };
        assert_eq!(noise(&cfg, QueryKey::new(0, 0), 5), DVector::zeros(5));
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(OracleConfig::gaussian(-1.0, 0).is_err());
        assert!(OracleConfig::gaussian(f64::NAN, 0).is_err());
    }

    #[test]
    fn config_json_uses_kebab_noise_kind() {
        let cfg: OracleConfig = serde_json::from_str(r#"{"sigma":0.5,"seed":4,"noise_kind":"gaussian-isotropic"}"#).unwrap();
        assert_eq!(cfg.noise_kind, NoiseKind::GaussianIsotropic);
        let cfg: OracleConfig = serde_json::from_str(r#"{"sigma":0.5,"seed":4}"#).unwrap();
        assert_eq!(cfg.noise_kind, NoiseKind::GaussianIsotropic);
    }
}
