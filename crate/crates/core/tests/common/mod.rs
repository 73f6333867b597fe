//! Checks shared by the integration tests and the acceptance runner. Each
//! returns `Err` with a description of the first failure.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use intercomm_sgd::algorithms::{metric_avg_grad_norm_sq, metric_scaffold_phase2, run, Algorithm, RunConfig, Trace};
use intercomm_sgd::harness::io::trace_to_csv;
use intercomm_sgd::oracle::{sample_gradient, OracleConfig, QueryKey};
use intercomm_sgd::problem::{LocalObjective, ProblemInstance};
use intercomm_sgd::theory::{rate_bound, run_suite, theoretical_stepsize, RateKind, RateParams, SuiteConfig};

pub type Check = Result<(), String>;

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random heterogeneous instance whose residuals cover every loss branch.
pub fn random_instance(seed: u64, d: usize, n: usize, reg: f64) -> ProblemInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locals = (0..n)
        .map(|_| {
            let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let anchor = gaussian_vec(&mut rng, d, 1.0);
            LocalObjective::from_anchor(a, anchor, reg).unwrap()
        })
        .collect();
    ProblemInstance::new(locals, seed).unwrap()
}

/// Central differences of values against gradients (step 1e-5, 1e-6
/// absolute) and of gradients against Hessians (1e-4) on `draws` points.
pub fn finite_differences(draws: usize, seed: u64) -> Check {
    let p = random_instance(seed, 6, 3, 0.3);
    let d = p.dimension();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    for k in 0..draws {
        let i = rng.random_range(0..p.num_workers());
        let x = gaussian_vec(&mut rng, d, 1.5);
        let g = p.local_grad(i, &x).unwrap();
        let hess = p.local_hess(i, &x).unwrap();
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (p.local_value(i, &xp).unwrap() - p.local_value(i, &xm).unwrap()) / (2.0 * h);
            if (fd - g[j]).abs() > 1e-6 {
                return Err(format!("draw {k}: gradient component {j} is {}, differences give {fd}", g[j]));
            }
            let col = (p.local_grad(i, &xp).unwrap() - p.local_grad(i, &xm).unwrap()) / (2.0 * h);
            let err = (col - hess.column(j)).amax();
            if err > 1e-4 {
                return Err(format!("draw {k}: Hessian column {j} off by {err}"));
            }
        }
    }
    Ok(())
}

/// Monte-Carlo mean and second moment of the oracle noise.
pub fn oracle_statistics(samples: u64, sigma: f64) -> Check {
    let p = random_instance(3, 10, 2, 0.01);
    let cfg = OracleConfig::gaussian(sigma, 42).map_err(|e| e.to_string())?;
    let x = DVector::from_element(10, 0.2);
    let exact = p.local_grad(1, &x).unwrap();
    let mut sum = DVector::zeros(10);
    let mut sq = 0.0;
    for t in 0..samples {
        let nu = sample_gradient(&p, &cfg, QueryKey::new(1, t), &x).unwrap() - &exact;
        sq += nu.norm_squared();
        sum += nu;
    }
    let n = samples as f64;
    let bias = (sum / n).norm();
    let second = sq / n;
    let bias_bound = 3.0 * sigma / n.sqrt();
    if bias > bias_bound {
        return Err(format!("bias {bias:e} exceeds {bias_bound:e}"));
    }
    if (second - sigma * sigma).abs() > 0.05 * sigma * sigma {
        return Err(format!("E|nu|^2 = {second:e}, expected {:e}", sigma * sigma));
    }
    Ok(())
}

fn cfg(algorithm: Algorithm, eta: f64, tau: u64, loops: u64, d: usize, oracle: OracleConfig) -> RunConfig {
    RunConfig::new(algorithm, eta, tau, loops, vec![0.0; d], oracle)
}

/// With one local step LocalSGD and MbSGD write identical CSV bytes.
pub fn tau_one_equivalence() -> Check {
    let p = random_instance(5, 8, 4, 0.01);
    let oracle = OracleConfig::gaussian(0.05, 17).unwrap();
    let trace = |a| run(&p, &cfg(a, 0.05, 1, 40, 8, oracle)).unwrap();
    let (l, m) = (trace(Algorithm::Localsgd), trace(Algorithm::Mbsgd));
    if trace_to_csv(&l.records) != trace_to_csv(&m.records) || l.final_iterate != m.final_iterate {
        return Err("tau = 1 traces differ".into());
    }
    Ok(())
}

/// Noiseless LocalSGD on identical workers equals gradient descent on one.
pub fn homogeneous_equals_gd() -> Check {
    let single = random_instance(8, 5, 1, 0.01);
    let worker = single.locals()[0].clone();
    let p = ProblemInstance::new(vec![worker; 4], 0).unwrap();
    let (eta, tau, loops) = (0.02, 5, 6);
    let tr = run(&p, &cfg(Algorithm::Localsgd, eta, tau, loops, 5, OracleConfig::exact())).unwrap();
    let mut x = DVector::zeros(5);
    for r in &tr.records {
        let g = single.global_grad(&x).unwrap();
        if (r.grad_norm_sq - g.norm_squared()).abs() > 1e-12 {
            return Err(format!("t = {}: grad_norm_sq {} vs GD {}", r.t, r.grad_norm_sq, g.norm_squared()));
        }
        x -= eta * g;
    }
    let err = (&tr.final_iterate - &x).amax();
    if err > 1e-12 {
        return Err(format!("final iterate off GD by {err:e}"));
    }
    Ok(())
}

fn unit_quadratic() -> ProblemInstance {
    let l = LocalObjective::from_anchor(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1), 0.0).unwrap();
    ProblemInstance::new(vec![l], 0).unwrap()
}

fn hand_run(a: Algorithm) -> Trace {
    let c = RunConfig::new(a, 0.5, 2, 1, vec![1.0], OracleConfig::exact());
    run(&unit_quadratic(), &c).unwrap()
}

/// `f = x^2/2`, `x0 = 1`, `eta = 1/2`, `tau = 2`, one loop.
pub fn hand_examples() -> Check {
    let mb = hand_run(Algorithm::Mbsgd);
    if mb.final_iterate[0] != 0.0 {
        return Err(format!("mbsgd ends at {}, expected 0", mb.final_iterate[0]));
    }
    let ls = hand_run(Algorithm::Localsgd);
    let m = metric_avg_grad_norm_sq(&ls).map_err(|e| e.to_string())?.value;
    if m != 0.625 {
        return Err(format!("localsgd metric {m}, expected 0.625"));
    }
    let sc = hand_run(Algorithm::Scaffold);
    let m = metric_scaffold_phase2(&sc).map_err(|e| e.to_string())?;
    if sc.final_iterate[0] != 0.25 || m != 0.625 {
        return Err(format!("scaffold ends at {} with phase-2 metric {m}", sc.final_iterate[0]));
    }
    Ok(())
}

pub fn algorithm_equivalences() -> Check {
    tau_one_equivalence()?;
    homogeneous_equals_gd()?;
    hand_examples()
}

/// Zero violations over `draws` draws of every lemma check.
pub fn lemma_suites(draws: usize, seed: u64) -> Check {
    let reports = run_suite(&SuiteConfig::new(draws, seed)).map_err(|e| e.to_string())?;
    if reports.len() != 6 {
        return Err(format!("expected 6 lemma reports, got {}", reports.len()));
    }
    for r in &reports {
        if r.draws != draws || r.violations != 0 {
            return Err(format!("{}: {} violations in {} draws", r.lemma, r.violations, r.draws));
        }
    }
    Ok(())
}

fn close(what: &str, got: f64, want: f64) -> Check {
    if (got - want).abs() <= 1e-9 {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, hand evaluation gives {want}"))
    }
}

pub fn unit_params(n: u64, tau: u64, rounds: u64) -> RateParams {
    RateParams {
        l: Some(1.0),
        gap: Some(1.0),
        sigma: Some(1.0),
        n,
        tau,
        rounds,
        ..Default::default()
    }
}

/// The worked stepsize and the rate examples against hand arithmetic.
pub fn theory_examples() -> Check {
    let p = RateParams {
        zeta: Some(1.0),
        rho: Some(0.0),
        ..unit_params(10, 2, 1)
    };
    let s = theoretical_stepsize(RateKind::LocalsgdFaster, &p, 1000).map_err(|e| e.to_string())?;
    let terms = [1.0, f64::INFINITY, (2.0f64 * 10.0 / 1000.0).sqrt(), (4.0f64 / 27_000.0).cbrt(), (2.0f64 / 9000.0).cbrt()];
    for (t, want) in s.terms.iter().zip(terms) {
        if want.is_infinite() {
            if t.value != want {
                return Err(format!("stepsize term {} should be infinite", t.name));
            }
        } else {
            close(&t.name, t.value, want)?;
        }
    }
    close("stepsize", s.eta, (4.0f64 / 27_000.0).cbrt())?;

    let mb = rate_bound(RateKind::Mbsgd, &unit_params(1, 1, 100)).map_err(|e| e.to_string())?;
    close("mbsgd rate", mb.total, 1.0 / 100.0 + (1.0f64 / 100.0).sqrt())?;
    let quiet = RateParams {
        sigma: Some(0.0),
        zeta: Some(0.0),
        rho: Some(0.0),
        ..unit_params(1, 10, 100)
    };
    let lf = rate_bound(RateKind::LocalsgdFaster, &quiet).map_err(|e| e.to_string())?;
    close("localsgd_faster rate", lf.total, (1.0 / 10.0) / 100.0)?;
    Ok(())
}

/// Every parameter the kinds can use, at values valid for all of them.
pub fn full_params(rng: &mut ChaCha8Rng) -> RateParams {
    let l = rng.random_range(0.5..2.0);
    RateParams {
        l: Some(l),
        gap: Some(rng.random_range(0.1..2.0)),
        sigma: Some(rng.random_range(0.0..1.0)),
        zeta: Some(rng.random_range(0.0..1.0)),
        zeta_bar: Some(rng.random_range(0.0..1.0)),
        delta: Some(rng.random_range(0.0..0.4) * l),
        delta_bar: Some(rng.random_range(0.0..0.4) * l),
        rho: Some(rng.random_range(0.0..0.4) * l),
        m: Some(rng.random_range(0.0..1.0)),
        dist: Some(rng.random_range(0.1..2.0)),
        n: rng.random_range(1..20),
        tau: rng.random_range(1..50),
        rounds: rng.random_range(1..200),
    }
}

fn bump(v: &mut Option<f64>, factor: f64) {
    if let Some(x) = v {
        *x *= factor;
    }
}

/// Rate totals are non-increasing in `R` and non-decreasing in each other
/// parameter except `L`, over `cases` random base points.
pub fn rate_monotonicity(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let base = full_params(&mut rng);
        let factor = rng.random_range(1.01..1.5);
        let mut variants: Vec<(&str, RateParams)> = Vec::new();
        type Field = fn(&mut RateParams) -> &mut Option<f64>;
        let fields: [(&str, Field); 8] = [
            ("sigma", |p| &mut p.sigma),
            ("zeta", |p| &mut p.zeta),
            ("zeta_bar", |p| &mut p.zeta_bar),
            ("delta", |p| &mut p.delta),
            ("delta_bar", |p| &mut p.delta_bar),
            ("rho", |p| &mut p.rho),
            ("M", |p| &mut p.m),
            ("Delta", |p| &mut p.gap),
        ];
        for (name, field) in fields {
            let mut q = base;
            bump(field(&mut q), factor);
            variants.push((name, q));
        }
        for kind in RateKind::ALL {
            let Ok(b0) = rate_bound(kind, &base) else {
                return Err(format!("case {case}: {kind} rejected {base:?}"));
            };
            for (name, q) in &variants {
                // bumping a similarity constant may leave its valid range
                let Ok(b) = rate_bound(kind, q) else { continue };
                if b.total < b0.total * (1.0 - 1e-12) {
                    return Err(format!("case {case}: {kind} decreased when {name} grew"));
                }
            }
            let more_rounds = RateParams {
                rounds: base.rounds + 1 + case as u64 % 7,
                ..base
            };
            let b = rate_bound(kind, &more_rounds).map_err(|e| e.to_string())?;
            if b.total > b0.total * (1.0 + 1e-12) {
                return Err(format!("case {case}: {kind} increased with more rounds"));
            }
        }
    }
    Ok(())
}

pub fn theory_calculators() -> Check {
    theory_examples()?;
    rate_monotonicity(500, 2024)
}
