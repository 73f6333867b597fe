//! Closed-form rate bounds and stepsize assignments, plus numerical checks
//! of the inequalities the analyses rely on.
//!
//! Every rate term is evaluated with leading constant 1. The totals are
//! order-of-magnitude comparison tools, not certified bounds.

mod lemmas;

pub use lemmas::{
    check_q_bounds, check_smooth_contraction, check_smooth_weakly_convex_inequality, check_variance_identity,
    check_weak_convexity_contraction, run_suite, CheckResult, LemmaReport, QBoundCheck, SuiteConfig,
    INFLATION, RELATIVE_SLACK,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    Mbsgd,
    LocalsgdClassic,
    LocalsgdConvexPrev,
    ScaffoldClassic,
    ScaffoldQuadratic,
    LocalsgdFaster,
    LocalsgdConvex,
    LocalsgdHs,
    ScaffoldSpeedup,
    ScaffoldLipschitz,
}

impl RateKind {
    pub const ALL: [RateKind; 10] = [
        RateKind::Mbsgd,
        RateKind::LocalsgdClassic,
        RateKind::LocalsgdConvexPrev,
        RateKind::ScaffoldClassic,
        RateKind::ScaffoldQuadratic,
        RateKind::LocalsgdFaster,
        RateKind::LocalsgdConvex,
        RateKind::LocalsgdHs,
        RateKind::ScaffoldSpeedup,
        RateKind::ScaffoldLipschitz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RateKind::Mbsgd => "mbsgd",
            RateKind::LocalsgdClassic => "localsgd_classic",
            RateKind::LocalsgdConvexPrev => "localsgd_convex_prev",
            RateKind::ScaffoldClassic => "scaffold_classic",
            RateKind::ScaffoldQuadratic => "scaffold_quadratic",
            RateKind::LocalsgdFaster => "localsgd_faster",
            RateKind::LocalsgdConvex => "localsgd_convex",
            RateKind::LocalsgdHs => "localsgd_hs",
            RateKind::ScaffoldSpeedup => "scaffold_speedup",
            RateKind::ScaffoldLipschitz => "scaffold_lipschitz",
        }
    }

    /// Kinds with a printed stepsize assignment.
    pub fn has_stepsize(self) -> bool {
        matches!(
            self,
            RateKind::LocalsgdFaster
                | RateKind::LocalsgdConvex
                | RateKind::LocalsgdHs
                | RateKind::ScaffoldSpeedup
                | RateKind::ScaffoldLipschitz
        )
    }

    fn is_convex(self) -> bool {
        matches!(self, RateKind::LocalsgdConvexPrev | RateKind::LocalsgdConvex)
    }
}

impl fmt::Display for RateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RateKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown rate kind `{s}`")))
    }
}

/// Every symbol a rate formula can mention. Unused ones may be left out.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RateParams {
    #[serde(rename = "L", default)]
    pub l: Option<f64>,
    #[serde(rename = "Delta", default)]
    pub gap: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub zeta: Option<f64>,
    #[serde(default)]
    pub zeta_bar: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub delta_bar: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(rename = "M", default)]
    pub m: Option<f64>,
    /// Initial distance bound of the convex results.
    #[serde(rename = "D", default)]
    pub dist: Option<f64>,
    pub n: u64,
    pub tau: u64,
    #[serde(rename = "R")]
    pub rounds: u64,
}

impl RateParams {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.tau == 0 || self.rounds == 0 {
            return Err(Error::Config("n, tau and R must be positive".into()));
        }
        let fields = [
            ("L", self.l),
            ("Delta", self.gap),
            ("sigma", self.sigma),
            ("zeta", self.zeta),
            ("zeta_bar", self.zeta_bar),
            ("delta", self.delta),
            ("delta_bar", self.delta_bar),
            ("rho", self.rho),
            ("M", self.m),
            ("D", self.dist),
        ];
        for (name, value) in fields {
            if let Some(v) = value {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
                }
            }
        }
        if let Some(l) = self.l {
            let over = |v: Option<f64>, cap: f64| v.is_some_and(|v| v > cap);
            if over(self.rho, l) {
                return Err(Error::Config("rho must not exceed L".into()));
            }
            if over(self.delta, l) {
                return Err(Error::Config("delta must not exceed L".into()));
            }
            if over(self.delta_bar, 2.0 * l) {
                return Err(Error::Config("delta_bar must not exceed 2L".into()));
            }
        }
        Ok(())
    }
}

/// Typed view of the parameters a formula needs.
struct Needs<'a> {
    kind: RateKind,
    p: &'a RateParams,
}

impl Needs<'_> {
    fn get(&self, name: &'static str, v: Option<f64>) -> Result<f64> {
        v.ok_or_else(|| Error::MissingParameter {
            parameter: name,
            kind: self.kind.name().to_owned(),
        })
    }
    fn l(&self) -> Result<f64> {
        self.get("L", self.p.l)
    }
    fn gap(&self) -> Result<f64> {
        self.get("Delta", self.p.gap)
    }
    fn sigma(&self) -> Result<f64> {
        self.get("sigma", self.p.sigma)
    }
    fn zeta(&self) -> Result<f64> {
        self.get("zeta", self.p.zeta)
    }
    fn zeta_bar(&self) -> Result<f64> {
        self.get("zeta_bar", self.p.zeta_bar)
    }
    fn delta(&self) -> Result<f64> {
        self.get("delta", self.p.delta)
    }
    fn delta_bar(&self) -> Result<f64> {
        self.get("delta_bar", self.p.delta_bar)
    }
    fn rho(&self) -> Result<f64> {
        self.get("rho", self.p.rho)
    }
    fn m(&self) -> Result<f64> {
        self.get("M", self.p.m)
    }
    fn dist(&self) -> Result<f64> {
        self.get("D", self.p.dist)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTerm {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateBound {
    pub kind: RateKind,
    pub terms: Vec<RateTerm>,
    pub total: f64,
}

fn term(name: &str, value: f64) -> RateTerm {
    RateTerm {
        name: name.to_owned(),
        value,
    }
}

/// Evaluates the rate of `kind` term by term with unit constants.
pub fn rate_bound(kind: RateKind, params: &RateParams) -> Result<RateBound> {
    params.validate()?;
    let need = Needs { kind, p: params };
    let n = params.n as f64;
    let tau = params.tau as f64;
    let r = params.rounds as f64;

    // sqrt(L Delta sigma^2 / (n tau R))
    let noise = |l: f64, gap: f64, sigma: f64| term("noise", (l * gap * sigma * sigma / (n * tau * r)).sqrt());
    // (X Delta sigma)^{2/3} / (tau^{1/3} R^{2/3})
    let local_noise =
        |x: f64, gap: f64, sigma: f64| term("local_noise", (x * gap * sigma).powf(2.0 / 3.0) / (tau.cbrt() * r.powf(2.0 / 3.0)));

    let terms = match kind {
        RateKind::Mbsgd | RateKind::ScaffoldClassic => {
            let (l, gap, sigma) = (need.l()?, need.gap()?, need.sigma()?);
            vec![term("optimization", l * gap / r), noise(l, gap, sigma)]
        }
        RateKind::LocalsgdClassic => {
            let (l, gap, sigma, zeta) = (need.l()?, need.gap()?, need.sigma()?, need.zeta()?);
            vec![
                term("optimization", l * gap / r),
                noise(l, gap, sigma),
                term("heterogeneity", (l * gap * zeta / r).powf(2.0 / 3.0)),
                local_noise(l, gap, sigma),
            ]
        }
        RateKind::LocalsgdConvexPrev | RateKind::LocalsgdConvex => {
            let (l, dist, sigma) = (need.l()?, need.dist()?, need.sigma()?);
            let spread = if kind == RateKind::LocalsgdConvex {
                need.zeta()?
            } else {
                need.zeta_bar()?
            };
            let d2 = dist * dist;
            vec![
                term("optimization", l * d2 / (tau * r)),
                term("noise", sigma * dist / (n * tau * r).sqrt()),
                term("heterogeneity", (l * spread * spread * d2 * d2 / (r * r)).cbrt()),
                term("local_noise", (l * sigma * sigma * d2 * d2 / (tau * r * r)).cbrt()),
            ]
        }
        RateKind::ScaffoldQuadratic => {
            let (l, gap, sigma, delta_bar, rho) = (need.l()?, need.gap()?, need.sigma()?, need.delta_bar()?, need.rho()?);
            vec![term("optimization", (l / tau + delta_bar + rho) * gap / r), noise(l, gap, sigma)]
        }
        RateKind::LocalsgdFaster => {
            let (l, gap, sigma, zeta, rho) = (need.l()?, need.gap()?, need.sigma()?, need.zeta()?, need.rho()?);
            vec![
                term("optimization", (l / tau + rho) * gap / r),
                noise(l, gap, sigma),
                term("heterogeneity", (l * gap * zeta / r).powf(2.0 / 3.0)),
                local_noise(l, gap, sigma),
            ]
        }
        RateKind::LocalsgdHs => {
            let (l, gap, sigma, zeta) = (need.l()?, need.gap()?, need.sigma()?, need.zeta()?);
            let (delta_bar, m) = (need.delta_bar()?, need.m()?);
            vec![
                term("optimization", l * gap / r),
                noise(l, gap, sigma),
                term("heterogeneity", (delta_bar * gap * zeta / r).powf(2.0 / 3.0)),
                local_noise(l, gap, sigma),
                term("higher_order", (m * m * gap.powi(4) * zeta.powi(4) / r.powi(4)).powf(0.2)),
            ]
        }
        RateKind::ScaffoldSpeedup => {
            let (l, gap, sigma, delta, rho) = (need.l()?, need.gap()?, need.sigma()?, need.delta()?, need.rho()?);
            vec![
                term("optimization", (l / tau + (l * delta).sqrt() + rho) * gap / r),
                noise(l, gap, sigma),
                local_noise(l, gap, sigma),
            ]
        }
        RateKind::ScaffoldLipschitz => {
            let (l, gap, sigma, delta, rho) = (need.l()?, need.gap()?, need.sigma()?, need.delta()?, need.rho()?);
            let delta_bar = need.delta_bar()?;
            vec![
                term("optimization", (l / tau + (delta_bar * delta).sqrt() + rho) * gap / r),
                noise(l, gap, sigma),
                local_noise(delta_bar, gap, sigma),
            ]
        }
    };
    let total = terms.iter().map(|t| t.value).sum();
    Ok(RateBound { kind, terms, total })
}

/// `num / den`, or `+inf` when the denominator vanishes.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// One entry of a printed `min{...}` stepsize assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepsizeTerm {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stepsize {
    pub kind: RateKind,
    pub iterations: u64,
    pub terms: Vec<StepsizeTerm>,
    pub eta: f64,
}

/// Evaluates the printed stepsize assignment for `kind` with `t` total
/// iterations. Terms with a vanishing denominator count as `+inf`.
pub fn theoretical_stepsize(kind: RateKind, params: &RateParams, t: u64) -> Result<Stepsize> {
    params.validate()?;
    if t == 0 {
        return Err(Error::Config("T must be positive".into()));
    }
    let need = Needs { kind, p: params };
    let n = params.n as f64;
    let tau = params.tau as f64;
    let t_f = t as f64;
    let tm1 = tau - 1.0;

    let named = |pairs: Vec<(&str, f64)>| -> Vec<StepsizeTerm> {
        pairs
            .into_iter()
            .map(|(name, value)| StepsizeTerm {
                name: name.to_owned(),
                value,
            })
            .collect()
    };

    let terms = match kind {
        RateKind::LocalsgdFaster => {
            let (l, gap, sigma, zeta, rho) = (need.l()?, need.gap()?, need.sigma()?, need.zeta()?, need.rho()?);
            named(vec![
                ("smoothness", ratio(1.0, l)),
                ("weak_convexity", ratio(1.0 - ratio(rho, l), 6.0 * rho * tm1)),
                ("noise", ratio(2.0 * gap * n, l * sigma * sigma * t_f).sqrt()),
                ("heterogeneity", ratio(4.0 * gap, 27.0 * l * l * tm1 * tm1 * zeta * zeta * t_f).cbrt()),
                ("local_noise", ratio(2.0 * gap, 9.0 * l * l * tm1 * sigma * sigma * t_f).cbrt()),
            ])
        }
        RateKind::LocalsgdConvex => {
            let (l, dist, sigma, zeta) = (need.l()?, need.dist()?, need.sigma()?, need.zeta()?);
            let d2 = dist * dist;
            named(vec![
                ("smoothness", ratio(1.0, 2.0 * l)),
                ("noise", ratio(n * d2, 3.0 * sigma * sigma * t_f).sqrt()),
                ("heterogeneity", ratio(d2, 3.0 * l * tm1 * tm1 * zeta * zeta * t_f).cbrt()),
                ("local_noise", ratio(d2, 3.0 * l * tm1 * sigma * sigma * t_f).cbrt()),
            ])
        }
        RateKind::LocalsgdHs => {
            let (l, gap, sigma, zeta) = (need.l()?, need.gap()?, need.sigma()?, need.zeta()?);
            let (delta_bar, m) = (need.delta_bar()?, need.m()?);
            named(vec![
                ("smoothness", ratio(1.0, l)),
                ("drift", ratio(1.0, 3.0 * l * tm1)),
                ("noise", ratio(2.0 * gap * n, l * sigma * sigma * t_f).sqrt()),
                (
                    "heterogeneity",
                    ratio(gap, 54.0 * delta_bar * delta_bar * tm1 * tm1 * zeta * zeta * t_f).cbrt(),
                ),
                ("local_noise", ratio(gap, 9.0 * l * l * tm1 * sigma * sigma * t_f).cbrt()),
                (
                    "higher_order",
                    ratio(8.0 * gap, 81.0 * m * m * tm1.powi(3) * (2.0 * tau - 1.0) * zeta.powi(4) * t_f).powf(0.2),
                ),
            ])
        }
        RateKind::ScaffoldSpeedup => {
            let (l, gap, sigma, delta, rho) = (need.l()?, need.gap()?, need.sigma()?, need.delta()?, need.rho()?);
            named(vec![
                ("smoothness", ratio(1.0, 2.0 * l)),
                ("weak_convexity", ratio(1.0 - ratio(rho, l), 6.0 * rho * tm1)),
                ("similarity", ratio(1.0, 4.0 * (l * delta).sqrt() * tau)),
                ("noise", ratio(gap * n, 2.0 * l * sigma * sigma * t_f).sqrt()),
                ("local_noise", ratio(2.0 * gap, 3.0 * l * l * tm1 * sigma * sigma * t_f).cbrt()),
            ])
        }
        RateKind::ScaffoldLipschitz => {
            let (l, gap, sigma, delta, rho) = (need.l()?, need.gap()?, need.sigma()?, need.delta()?, need.rho()?);
            let delta_bar = need.delta_bar()?;
            named(vec![
                ("smoothness", ratio(1.0, 2.0 * l)),
                ("weak_convexity", ratio(1.0 - ratio(rho, l), 6.0 * rho * tm1)),
                ("similarity", ratio(1.0, 6.0 * (delta_bar * delta).sqrt() * tau)),
                ("noise", ratio(2.0 * gap * n, l * sigma * sigma * t_f).sqrt()),
                (
                    "local_noise",
                    ratio(gap, 12.0 * delta_bar * delta_bar * tm1 * sigma * sigma * t_f).cbrt(),
                ),
            ])
        }
        _ => {
            return Err(Error::Config(format!("no stepsize assignment for {kind}")));
        }
    };
    let eta = terms.iter().map(|t| t.value).fold(f64::INFINITY, f64::min);
    if !eta.is_finite() {
        return Err(Error::Degenerate(format!("every stepsize term of {kind} is unbounded")));
    }
    if !(eta > 0.0) {
        return Err(Error::Degenerate(format!("stepsize of {kind} is {eta}")));
    }
    Ok(Stepsize {
        kind,
        iterations: t,
        terms,
        eta,
    })
}

/// Whether `kind` needs the convex-only parameter `D`.
pub fn needs_distance(kind: RateKind) -> bool {
    kind.is_convex()
}
