//! Numerical checks of the technical inequalities, evaluated with exact
//! gradients and estimated constants.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    estimate_delta_bar, estimate_l, estimate_m, estimate_rho, ConditioningReport, SampleSet, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::linalg::pairwise_mean;
use crate::problem::{generate_problem, GenerationSpec, ProblemInstance};

/// Factor applied to every estimated constant before checking.
pub const INFLATION: f64 = 1.05;

/// Violations smaller than this fraction of the magnitudes involved are
/// attributed to rounding.
pub const RELATIVE_SLACK: f64 = 1e-9;

/// Outcome of one inequality `lhs <= rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub lhs: f64,
    pub rhs: f64,
    /// Magnitude the rounding allowance is measured against.
    pub scale: f64,
    pub holds: bool,
}

impl CheckResult {
    fn new(lhs: f64, rhs: f64, scale: f64) -> Self {
        let scale = scale.abs().max(lhs.abs()).max(rhs.abs());
        CheckResult {
            lhs,
            rhs,
            scale,
            holds: lhs <= rhs + RELATIVE_SLACK * scale + 1e-12,
        }
    }

    /// `(rhs - lhs) / scale`; negative means violated.
    pub fn relative_slack(&self) -> f64 {
        if self.scale == 0.0 {
            0.0
        } else {
            (self.rhs - self.lhs) / self.scale
        }
    }
}

fn mean_sq_dist(points: &[DVector<f64>], y: &DVector<f64>) -> f64 {
    points.iter().map(|x| (x - y).norm_squared()).sum::<f64>() / points.len() as f64
}

/// `(1/n) sum |x_i - xbar|^2 <= (1/n) sum |x_i - y|^2`.
pub fn check_variance_identity(points: &[DVector<f64>], y: &DVector<f64>) -> Result<CheckResult> {
    let first = points
        .first()
        .ok_or_else(|| Error::Precondition("variance check needs at least one point".into()))?;
    if let Some(bad) = points.iter().chain(std::iter::once(y)).find(|v| v.len() != first.len()) {
        return Err(Error::Dimension {
            expected: first.len(),
            actual: bad.len(),
        });
    }
    let xbar = pairwise_mean(points);
    let lhs = mean_sq_dist(points, &xbar);
    let rhs = mean_sq_dist(points, y);
    Ok(CheckResult::new(lhs, rhs, 0.0))
}

fn gradient_gap(
    p: &ProblemInstance,
    i: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if x.len() != p.dimension() || y.len() != p.dimension() {
        return Err(Error::Dimension {
            expected: p.dimension(),
            actual: if x.len() != p.dimension() { x.len() } else { y.len() },
        });
    }
    Ok((x - y, p.local_grad(i, x)? - p.local_grad(i, y)?))
}

fn positive_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{name} must be finite and non-negative, got {v}")))
    }
}

/// `|(x - eta g_i(x)) - (y - eta g_i(y))|^2 <= (1 + 2 L rho eta / (L - rho)) |x - y|^2`.
pub fn check_weak_convexity_contraction(
    p: &ProblemInstance,
    i: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    eta: f64,
    l: f64,
    rho: f64,
) -> Result<CheckResult> {
    positive_finite("eta", eta)?;
    positive_finite("L", l)?;
    positive_finite("rho", rho)?;
    if rho >= l {
        return Err(Error::Precondition(format!("needs rho < L, got rho = {rho}, L = {l}")));
    }
    if eta > 2.0 / (l - rho) {
        return Err(Error::Precondition(format!(
            "needs eta <= 2/(L - rho) = {}, got {eta}",
            2.0 / (l - rho)
        )));
    }
    let (dx, dg) = gradient_gap(p, i, x, y)?;
    let lhs = (&dx - &dg * eta).norm_squared();
    let dist2 = dx.norm_squared();
    let rhs = (1.0 + 2.0 * l * rho * eta / (l - rho)) * dist2;
    Ok(CheckResult::new(lhs, rhs, dist2 + eta * eta * dg.norm_squared()))
}

/// `|(x - eta g_i(x)) - (y - eta g_i(y))|^2 <= (1 + L eta)^2 |x - y|^2`.
pub fn check_smooth_contraction(
    p: &ProblemInstance,
    i: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    eta: f64,
    l: f64,
) -> Result<CheckResult> {
    positive_finite("eta", eta)?;
    positive_finite("L", l)?;
    let (dx, dg) = gradient_gap(p, i, x, y)?;
    let lhs = (&dx - &dg * eta).norm_squared();
    let rhs = (1.0 + l * eta).powi(2) * dx.norm_squared();
    Ok(CheckResult::new(lhs, rhs, 0.0))
}

/// `|g_i(x) - g_i(y)|^2 - rho L |x - y|^2 <= (L - rho) <x - y, g_i(x) - g_i(y)>`.
pub fn check_smooth_weakly_convex_inequality(
    p: &ProblemInstance,
    i: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    l: f64,
    rho: f64,
) -> Result<CheckResult> {
    positive_finite("L", l)?;
    positive_finite("rho", rho)?;
    let (dx, dg) = gradient_gap(p, i, x, y)?;
    let (g2, x2) = (dg.norm_squared(), dx.norm_squared());
    let lhs = g2 - rho * l * x2;
    let rhs = (l - rho) * dx.dot(&dg);
    Ok(CheckResult::new(lhs, rhs, g2 + rho * l * x2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QBoundCheck {
    /// `|(1/n) sum g_i(x_i) - g(xbar)|^2`.
    pub q: f64,
    /// `(1/n) sum |x_i - xbar|^2`.
    pub xi: f64,
    /// Against `L^2 Xi`.
    pub plain: CheckResult,
    /// Against `8 delta_bar^2 Xi + (M^2 / 2) Xi^2`.
    pub refined: CheckResult,
}

impl QBoundCheck {
    pub fn holds(&self) -> bool {
        self.plain.holds && self.refined.holds
    }
}

/// Both upper bounds on the gradient discrepancy of one point per worker.
pub fn check_q_bounds(
    p: &ProblemInstance,
    points: &[DVector<f64>],
    l: f64,
    delta_bar: f64,
    m: f64,
) -> Result<QBoundCheck> {
    if points.len() != p.num_workers() {
        return Err(Error::Precondition(format!(
            "needs one point per worker ({}), got {}",
            p.num_workers(),
            points.len()
        )));
    }
    for v in points {
        if v.len() != p.dimension() {
            return Err(Error::Dimension {
                expected: p.dimension(),
                actual: v.len(),
            });
        }
    }
    let xbar = pairwise_mean(points);
    let grads = points
        .iter()
        .enumerate()
        .map(|(i, x)| p.local_grad(i, x))
        .collect::<Result<Vec<_>>>()?;
    let q = (pairwise_mean(&grads) - p.global_grad(&xbar)?).norm_squared();
    let xi = mean_sq_dist(points, &xbar);
    Ok(QBoundCheck {
        q,
        xi,
        plain: CheckResult::new(q, l * l * xi, 0.0),
        refined: CheckResult::new(q, 8.0 * delta_bar * delta_bar * xi + 0.5 * m * m * xi * xi, 0.0),
    })
}

/// Aggregate over the randomized draws of one inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma: String,
    pub draws: usize,
    pub violations: usize,
    /// Smallest relative slack seen; negative values are violations.
    pub worst_slack: f64,
}

impl LemmaReport {
    fn new(lemma: &str) -> Self {
        LemmaReport {
            lemma: lemma.to_owned(),
            draws: 0,
            violations: 0,
            worst_slack: f64::INFINITY,
        }
    }

    fn record(&mut self, r: &CheckResult) {
        self.draws += 1;
        if !r.holds {
            self.violations += 1;
        }
        self.worst_slack = self.worst_slack.min(r.relative_slack());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub draws: usize,
    pub seed: u64,
    /// Instance the function-valued checks run on.
    pub instance: GenerationSpec,
}

impl SuiteConfig {
    /// A small calibrated instance that keeps the suite at a few seconds.
    pub fn new(draws: usize, seed: u64) -> Self {
        SuiteConfig {
            draws,
            seed,
            instance: GenerationSpec {
                dimension: 20,
                num_workers: 5,
                seed: seed.wrapping_add(1),
                target_l: 1.0,
                target_zeta: Some(0.05),
                target_delta: 0.02,
                reg_weight: 0.01,
                calibration_tolerance: 0.05,
                calibration_max_iters: 60,
                target_gap: 1.0,
                spread_scale: None,
            },
        }
    }
}

// Points follow the estimator sampler's law: Gaussian around the origin
// (radius 1) or around a random anchor (radius 1/2).
struct PointLaw<'a> {
    p: &'a ProblemInstance,
    sampler: SamplerConfig,
}

impl PointLaw<'_> {
    fn gaussian(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(self.p.dimension(), |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn around(&self, rng: &mut ChaCha8Rng, center: &DVector<f64>, radius: f64) -> DVector<f64> {
        center + self.gaussian(rng) * (radius / (self.p.dimension() as f64).sqrt())
    }

    fn point(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        if rng.random::<bool>() {
            self.around(rng, &DVector::zeros(self.p.dimension()), self.sampler.origin_radius)
        } else {
            let i = rng.random_range(0..self.p.num_workers());
            self.around(rng, &self.p.locals()[i].anchor, self.sampler.anchor_radius)
        }
    }
}

// Instance-wide constants, raised by the values sampled along the segments
// the inequality actually uses, then inflated.
#[derive(Clone, Copy)]
struct Constants {
    l: f64,
    rho: f64,
    delta_bar: f64,
    m: f64,
}

fn segment_samples(x: &DVector<f64>, y: &DVector<f64>) -> SampleSet {
    let points: Vec<_> = (0..=4).map(|k| x + (y - x) * (k as f64 / 4.0)).collect();
    let pairs = points.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
    SampleSet::from_points(points, pairs)
}

impl Constants {
    fn from_report(r: &ConditioningReport) -> Self {
        Constants {
            l: r.l,
            rho: r.rho,
            delta_bar: r.delta_bar,
            m: r.m,
        }
    }

    fn along(&self, p: &ProblemInstance, segments: &[(&DVector<f64>, &DVector<f64>)]) -> Result<Constants> {
        let mut c = *self;
        for (x, y) in segments {
            let s = segment_samples(x, y);
            c.l = c.l.max(estimate_l(p, &s)?.value);
            c.rho = c.rho.max(estimate_rho(p, &s)?);
            c.delta_bar = c.delta_bar.max(estimate_delta_bar(p, &s)?.value);
            c.m = c.m.max(estimate_m(p, &s)?.value);
        }
        c.l = c.l.max(c.rho);
        Ok(Constants {
            l: c.l * INFLATION,
            rho: c.rho * INFLATION,
            delta_bar: c.delta_bar * INFLATION,
            m: c.m * INFLATION,
        })
    }
}

/// Runs every check on `cfg.draws` random draws and reports the violations.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<LemmaReport>> {
    if cfg.draws == 0 {
        return Err(Error::Config("draws must be positive".into()));
    }
    let p = generate_problem(&cfg.instance).map_err(|e| e.context("generating the lemma instance"))?;
    let sampler = SamplerConfig::with_seed(cfg.seed);
    let x0 = DVector::zeros(p.dimension());
    let report = crate::conditioning::estimate_all(&p, &sampler, None, &x0)?;
    let base = Constants::from_report(&report);
    let law = PointLaw { p: &p, sampler };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = p.num_workers();

    let mut variance = LemmaReport::new("variance_identity");
    let mut weak = LemmaReport::new("weak_convexity_contraction");
    let mut smooth = LemmaReport::new("smooth_contraction");
    let mut q_plain = LemmaReport::new("q_bound_plain");
    let mut q_refined = LemmaReport::new("q_bound_refined");
    let mut swc = LemmaReport::new("smooth_weakly_convex_inequality");

    for _ in 0..cfg.draws {
        let k = rng.random_range(1..=8);
        let pts: Vec<_> = (0..k).map(|_| law.point(&mut rng)).collect();
        let y = law.point(&mut rng);
        variance.record(&check_variance_identity(&pts, &y)?);

        let i = rng.random_range(0..n);
        let (x, y) = (law.point(&mut rng), law.point(&mut rng));
        let c = base.along(&p, &[(&x, &y)])?;
        let eta = rng.random::<f64>() * 2.0 / (c.l - c.rho);
        weak.record(&check_weak_convexity_contraction(&p, i, &x, &y, eta, c.l, c.rho)?);
        let eta = rng.random::<f64>() * 2.0 / c.l;
        smooth.record(&check_smooth_contraction(&p, i, &x, &y, eta, c.l)?);
        swc.record(&check_smooth_weakly_convex_inequality(&p, i, &x, &y, c.l, c.rho)?);

        // one point per worker, spread log-uniformly around a common center
        let center = law.point(&mut rng);
        let radius = (1e-3f64.ln() + rng.random::<f64>() * (1e3f64).ln()).exp();
        let tuple: Vec<_> = (0..n).map(|_| law.around(&mut rng, &center, radius)).collect();
        let xbar = pairwise_mean(&tuple);
        let segments: Vec<_> = tuple.iter().map(|x| (x, &xbar)).collect();
        let c = base.along(&p, &segments)?;
        let q = check_q_bounds(&p, &tuple, c.l, c.delta_bar, c.m)?;
        q_plain.record(&q.plain);
        q_refined.record(&q.refined);
    }
    Ok(vec![variance, weak, smooth, q_plain, q_refined, swc])
}


#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn suite_on_generated_instance_has_no_violations() {
        let reports = run_suite(&SuiteConfig::new(200, 7)).unwrap();
        assert_eq!(reports.len(), 6);
        for r in &reports {
            println!("{r:?}");
            assert_eq!(r.draws, 200);
            assert_eq!(r.violations, 0, "{r:?}");
        }
    }
}
