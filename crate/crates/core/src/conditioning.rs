//! Sampled estimators for the smoothness, similarity and curvature constants
//! of a [`ProblemInstance`].
//!
//! Every supremum-type constant is reported as a maximum over a finite
//! sample of points (or point pairs), so the estimates are lower envelopes
//! of the true constants. Adding points never decreases an estimate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pairwise_mean, PowerIteration};
use crate::oracle::{sample_gradient, OracleConfig, QueryKey};
use crate::problem::ProblemInstance;

/// How to draw sample points around the origin and the worker anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seed: u64,
    pub origin_points: usize,
    pub anchor_points: usize,
    pub origin_radius: f64,
    pub anchor_radius: f64,
    /// Separation range for the point pairs used by difference quotients.
    pub min_separation: f64,
    pub max_separation: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            seed: 20_240_601,
            origin_points: 32,
            anchor_points: 32,
            origin_radius: 1.0,
            anchor_radius: 0.5,
            min_separation: 1e-3,
            max_separation: 1e-1,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(seed: u64) -> Self {
        SamplerConfig {
            seed,
            ..Default::default()
        }
    }

    /// Draws the sample set for `p`. A Gaussian point of "radius r" around
    /// `c` is `c + r * g / sqrt(d)`, so its expected squared distance is `r^2`.
    pub fn draw(&self, p: &ProblemInstance) -> SampleSet {
        let d = p.dimension();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = 1.0 / (d as f64).sqrt();
        let gaussian = |rng: &mut ChaCha8Rng| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));

        let mut points = Vec::with_capacity(self.origin_points + self.anchor_points);
        for _ in 0..self.origin_points {
            points.push(gaussian(&mut rng) * (self.origin_radius * scale));
        }
        for k in 0..self.anchor_points {
            let anchor = &p.locals()[k % p.num_workers()].anchor;
            points.push(anchor + gaussian(&mut rng) * (self.anchor_radius * scale));
        }

        let (lo, hi) = (self.min_separation.ln(), self.max_separation.ln());
        let pairs = points
            .iter()
            .map(|x| {
                let mut w = gaussian(&mut rng);
                let norm = w.norm();
                if norm > 0.0 {
                    w /= norm;
                }
                let r = (lo + (hi - lo) * rng.random::<f64>()).exp();
                (x.clone(), x + w * r)
            })
            .collect();

        SampleSet {
            points,
            pairs,
            radius: self.origin_radius,
            seed: self.seed,
        }
    }
}

/// Points (and nearby point pairs) at which the estimators are evaluated.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub points: Vec<DVector<f64>>,
    pub pairs: Vec<(DVector<f64>, DVector<f64>)>,
    pub radius: f64,
    pub seed: u64,
}

impl SampleSet {
    pub fn from_points(points: Vec<DVector<f64>>, pairs: Vec<(DVector<f64>, DVector<f64>)>) -> Self {
        SampleSet {
            points,
            pairs,
            radius: 0.0,
            seed: 0,
        }
    }

    /// Keeps the first `points` points and the first `pairs` pairs.
    pub fn truncated(&self, points: usize, pairs: usize) -> Self {
        SampleSet {
            points: self.points.iter().take(points).cloned().collect(),
            pairs: self.pairs.iter().take(pairs).cloned().collect(),
            radius: self.radius,
            seed: self.seed,
        }
    }
}

/// A sampled constant plus whether every power iteration behind it converged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub converged: bool,
}

impl Estimate {
    fn zero() -> Self {
        Estimate {
            value: 0.0,
            converged: true,
        }
    }

    fn absorb(&mut self, value: f64, converged: bool) {
        if value > self.value {
            self.value = value;
        }
        self.converged &= converged;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningReport {
    #[serde(rename = "L")]
    pub l: f64,
    pub sigma: f64,
    pub zeta: f64,
    pub zeta_bar: f64,
    pub delta: f64,
    pub delta_bar: f64,
    pub rho: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "Delta")]
    pub gap: f64,
    pub sample_points: usize,
    pub sample_radius: f64,
    pub fstar_estimate: f64,
    pub seed: u64,
    /// Some power iteration or the f* descent stopped before converging.
    pub approximate: bool,
}

impl ConditioningReport {
    /// Copy with every constant multiplied by `factor` (used to cover
    /// sampling error before checking inequalities).
    pub fn inflated(&self, factor: f64) -> Self {
        ConditioningReport {
            l: self.l * factor,
            sigma: self.sigma * factor,
            zeta: self.zeta * factor,
            zeta_bar: self.zeta_bar * factor,
            delta: self.delta * factor,
            delta_bar: self.delta_bar * factor,
            rho: self.rho * factor,
            m: self.m * factor,
            ..self.clone()
        }
    }
}

fn power() -> PowerIteration {
    PowerIteration::default()
}

/// Largest spectral norm of a local Hessian over the sample.
pub fn estimate_l(p: &ProblemInstance, samples: &SampleSet) -> Result<Estimate> {
    let mut est = Estimate::zero();
    for x in &samples.points {
        for i in 0..p.num_workers() {
            let h = p.local_hess(i, x)?;
            let e = power().matrix_norm(&h);
            est.absorb(e.value, e.converged);
        }
    }
    Ok(est)
}

fn gradient_spread(p: &ProblemInstance, x: &DVector<f64>) -> Result<Vec<f64>> {
    let grads = (0..p.num_workers())
        .map(|i| p.local_grad(i, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(centered(&grads).iter().map(|g| g.norm_squared()).collect())
}

/// Root of the largest sampled mean squared gradient deviation.
pub fn estimate_zeta(p: &ProblemInstance, samples: &SampleSet) -> Result<f64> {
    let n = p.num_workers() as f64;
    let mut best = 0.0f64;
    for x in &samples.points {
        let dev = gradient_spread(p, x)?;
        best = best.max(dev.iter().sum::<f64>() / n);
    }
    Ok(best.sqrt())
}

/// Root of the largest sampled per-worker squared gradient deviation.
pub fn estimate_zeta_bar(p: &ProblemInstance, samples: &SampleSet) -> Result<f64> {
    let n = p.num_workers() as f64;
    let mut best = 0.0f64;
    for x in &samples.points {
        let dev = gradient_spread(p, x)?;
        let max = dev.iter().cloned().fold(0.0, f64::max);
        // max >= mean holds exactly; keep it so under rounding too
        best = best.max(max).max(dev.iter().sum::<f64>() / n);
    }
    Ok(best.sqrt())
}

// v_i - mean(v), computed through offsets from v_0 so that identical inputs
// give exactly zero.
fn centered(vs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let offsets: Vec<_> = vs.iter().map(|v| v - &vs[0]).collect();
    let shift = pairwise_mean(&offsets);
    offsets.into_iter().map(|o| o - &shift).collect()
}

// H_i(x) - H(x) for every worker.
fn hessian_deviations(p: &ProblemInstance, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
    let hs = (0..p.num_workers())
        .map(|i| p.local_hess(i, x))
        .collect::<Result<Vec<_>>>()?;
    // offsets from worker 0 keep identical workers at exactly zero deviation
    let offsets: Vec<_> = hs.iter().map(|h| h - &hs[0]).collect();
    let mut shift = offsets[0].clone();
    for o in &offsets[1..] {
        shift += o;
    }
    shift /= hs.len() as f64;
    Ok(offsets.into_iter().map(|o| o - &shift).collect())
}

// (g_i(x) - g(x)) - (g_i(y) - g(y)) for every worker, as squared norms.
fn pair_deviations(p: &ProblemInstance, x: &DVector<f64>, y: &DVector<f64>) -> Result<Vec<f64>> {
    let gx = (0..p.num_workers()).map(|i| p.local_grad(i, x)).collect::<Result<Vec<_>>>()?;
    let gy = (0..p.num_workers()).map(|i| p.local_grad(i, y)).collect::<Result<Vec<_>>>()?;
    let (cx, cy) = (centered(&gx), centered(&gy));
    Ok(cx.iter().zip(&cy).map(|(a, b)| (a - b).norm_squared()).collect())
}

fn mean_deviation_norm(devs: &[DMatrix<f64>]) -> (f64, bool) {
    let mut s = devs[0].tr_mul(&devs[0]);
    for dm in &devs[1..] {
        s += dm.tr_mul(dm);
    }
    s /= devs.len() as f64;
    let e = power().matrix_norm(&s);
    (e.value.sqrt(), e.converged)
}

/// Mean Hessian similarity: curvature version
/// `sqrt(lambda_max((1/n) sum (H_i - H)^T (H_i - H)))` maximized over points,
/// cross-checked by difference quotients over the sample pairs.
pub fn estimate_delta(p: &ProblemInstance, samples: &SampleSet) -> Result<Estimate> {
    let mut est = Estimate::zero();
    for x in &samples.points {
        let devs = hessian_deviations(p, x)?;
        let (v, ok) = mean_deviation_norm(&devs);
        est.absorb(v, ok);
    }
    let n = p.num_workers() as f64;
    for (x, y) in &samples.pairs {
        let dist2 = (x - y).norm_squared();
        if dist2 == 0.0 {
            continue;
        }
        let dev = pair_deviations(p, x, y)?;
        est.absorb((dev.iter().sum::<f64>() / n / dist2).sqrt(), true);
    }
    Ok(est)
}

/// Uniform Hessian similarity, the worker-wise maximum analogue of
/// [`estimate_delta`].
pub fn estimate_delta_bar(p: &ProblemInstance, samples: &SampleSet) -> Result<Estimate> {
    let mut est = Estimate::zero();
    for x in &samples.points {
        let devs = hessian_deviations(p, x)?;
        let (mean_norm, ok) = mean_deviation_norm(&devs);
        est.absorb(mean_norm, ok);
        for dm in &devs {
            let e = power().matrix_norm(dm);
            est.absorb(e.value, e.converged);
        }
    }
    for (x, y) in &samples.pairs {
        let dist2 = (x - y).norm_squared();
        if dist2 == 0.0 {
            continue;
        }
        let dev = pair_deviations(p, x, y)?;
        let max = dev.iter().cloned().fold(0.0, f64::max);
        let mean = dev.iter().sum::<f64>() / p.num_workers() as f64;
        est.absorb((max.max(mean) / dist2).sqrt(), true);
    }
    Ok(est)
}

/// Weak-convexity modulus: `max(0, -min lambda_min(H_i(x)))` over the sample.
///
/// Uses a full symmetric eigendecomposition: the quantity of interest is
/// typically three orders of magnitude below the spectral norm, which a
/// fixed-budget power iteration on the shifted operator cannot resolve.
pub fn estimate_rho(p: &ProblemInstance, samples: &SampleSet) -> Result<f64> {
    let mut lowest = 0.0f64;
    for x in &samples.points {
        for i in 0..p.num_workers() {
            let h = p.local_hess(i, x)?;
            let eig = SymmetricEigen::new(h);
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            lowest = lowest.min(min);
        }
    }
    Ok((-lowest).max(0.0))
}

/// Hessian-Lipschitz constant of the global objective (the uniform member
/// of the convex hull), as the largest difference quotient over the pairs.
pub fn estimate_m(p: &ProblemInstance, samples: &SampleSet) -> Result<Estimate> {
    let mut est = Estimate::zero();
    for (x, y) in &samples.pairs {
        let dist = (x - y).norm();
        if dist == 0.0 {
            continue;
        }
        let diff = p.global_hess(x)? - p.global_hess(y)?;
        let e = power().matrix_norm(&diff);
        est.absorb(e.value / dist, e.converged);
    }
    Ok(est)
}

/// Root-mean-square oracle noise norm, by Monte Carlo over the sample points.
pub fn estimate_sigma(
    p: &ProblemInstance,
    oracle: &OracleConfig,
    samples: &SampleSet,
    replicas: u32,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, x) in samples.points.iter().enumerate() {
        for i in 0..p.num_workers() {
            let g = p.local_grad(i, x)?;
            for replica in 0..replicas {
                let key = QueryKey {
                    worker: i,
                    iteration: k as u64,
                    replica,
                };
                let s = sample_gradient(p, oracle, key, x)?;
                total += (s - &g).norm_squared();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { (total / count as f64).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FstarEstimate {
    pub value: f64,
    pub converged: bool,
    /// Set when a descent run produced a non-finite value.
    pub diverged: bool,
}

/// Maximum number of descent steps per start point.
pub const FSTAR_MAX_STEPS: usize = 100_000;

/// Approximates `inf f` by deterministic gradient descent with stepsize
/// `0.5 / l_estimate`, started from `x0` and from every anchor. Each run
/// stops early once the gradient norm falls below `1e-10`.
pub fn approximate_fstar(p: &ProblemInstance, x0: &DVector<f64>, l_estimate: f64) -> Result<FstarEstimate> {
    if !(l_estimate > 0.0) {
        return Err(Error::Precondition(format!(
            "f* descent needs a positive smoothness estimate, got {l_estimate}"
        )));
    }
    let eta = 0.5 / l_estimate;
    let mut starts = vec![x0.clone()];
    starts.extend(p.locals().iter().map(|l| l.anchor.clone()));

    let mut best = f64::INFINITY;
    let mut converged = true;
    let mut diverged = false;
    for start in starts {
        let mut x = start;
        let mut done = false;
        for _ in 0..FSTAR_MAX_STEPS {
            let (v, g) = p.global_value_grad(&x)?;
            if !v.is_finite() {
                diverged = true;
                done = true;
                break;
            }
            best = best.min(v);
            if g.norm() <= 1e-10 {
                done = true;
                break;
            }
            x.axpy(-eta, &g, 1.0);
        }
        if !done {
            best = best.min(p.global_value(&x)?);
            converged = false;
        }
    }
    Ok(FstarEstimate {
        value: best,
        converged,
        diverged,
    })
}

/// `f(x0) - f*`, floored at zero.
pub fn estimate_gap(p: &ProblemInstance, x0: &DVector<f64>, fstar: f64) -> Result<f64> {
    Ok((p.global_value(x0)? - fstar).max(0.0))
}

/// Runs every estimator and assembles the report. `oracle` supplies the
/// noise law whose sigma is measured; `None` reports sigma = 0.
pub fn estimate_all(
    p: &ProblemInstance,
    sampler: &SamplerConfig,
    oracle: Option<&OracleConfig>,
    x0: &DVector<f64>,
) -> Result<ConditioningReport> {
    let samples = sampler.draw(p);
    let l = estimate_l(p, &samples)?;
    let delta = estimate_delta(p, &samples)?;
    let delta_bar = estimate_delta_bar(p, &samples)?;
    let m = estimate_m(p, &samples)?;
    let rho = estimate_rho(p, &samples)?;
    let zeta = estimate_zeta(p, &samples)?;
    let zeta_bar = estimate_zeta_bar(p, &samples)?;
    let sigma = match oracle {
        Some(cfg) => estimate_sigma(p, cfg, &samples.truncated(8, 0), 16)?,
        None => 0.0,
    };
    // spectral norm bounds |lambda_min| at every point
    let l_value = l.value.max(rho);
    let fstar = if l_value > 0.0 {
        approximate_fstar(p, x0, l_value)?
    } else {
        // zero curvature everywhere: f is constant
        FstarEstimate {
            value: p.global_value(x0)?,
            converged: true,
            diverged: false,
        }
    };
    let gap = estimate_gap(p, x0, fstar.value)?;
    Ok(ConditioningReport {
        l: l_value,
        sigma,
        zeta,
        zeta_bar: zeta_bar.max(zeta),
        delta: delta.value,
        delta_bar: delta_bar.value.max(delta.value),
        rho,
        m: m.value,
        gap,
        sample_points: samples.points.len(),
        sample_radius: samples.radius,
        fstar_estimate: fstar.value,
        seed: sampler.seed,
        approximate: !(l.converged && delta.converged && delta_bar.converged && m.converged && fstar.converged),
    })
}
