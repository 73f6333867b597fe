use nalgebra::DVector;

use super::{Algorithm, RunConfig, Trace, TraceRecord};
use crate::error::{Error, Result};
use crate::linalg::{pairwise_mean, pairwise_sum};
use crate::oracle::{noise, sample_gradient, QueryKey};
use crate::problem::ProblemInstance;

/// A run is aborted once `|x|` or `f(x)` of the worker average exceeds this.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

struct Recorder<'a> {
    p: &'a ProblemInstance,
    tau: u64,
    every: u64,
    records: Vec<TraceRecord>,
    // (grad_norm_sq, f) at the last evaluated point, while it stays put
    cached: Option<(f64, f64)>,
}

enum Step {
    Continue,
    Diverged,
}

impl<'a> Recorder<'a> {
    fn new(p: &'a ProblemInstance, cfg: &RunConfig) -> Self {
        let total = cfg.total_iterations();
        Recorder {
            p,
            tau: cfg.tau,
            every: cfg.record_every,
            records: Vec::with_capacity(total.div_ceil(cfg.record_every) as usize),
            cached: None,
        }
    }

    /// Observes the average `xbar` at iteration `t`. `unchanged` promises
    /// that `xbar` equals the previously observed point.
    fn observe(&mut self, t: u64, xbar: &DVector<f64>, consensus_sq: f64, unchanged: bool) -> Result<Step> {
        if !unchanged {
            self.cached = None;
        }
        if !(xbar.norm() <= DIVERGENCE_THRESHOLD) {
            return Ok(Step::Diverged);
        }
        if t % self.every != 0 {
            return Ok(Step::Continue);
        }
        let (grad_norm_sq, f_value) = match self.cached {
            Some(v) => v,
            None => {
                let (f, g) = self.p.global_value_grad(xbar)?;
                (g.norm_squared(), f)
            }
        };
        self.cached = Some((grad_norm_sq, f_value));
        if !(f_value <= DIVERGENCE_THRESHOLD) || !grad_norm_sq.is_finite() {
            return Ok(Step::Diverged);
        }
        self.records.push(TraceRecord {
            t,
            round: t / self.tau,
            grad_norm_sq,
            f_value,
            consensus_sq,
        });
        Ok(Step::Continue)
    }

    fn finish(self, cfg: &RunConfig, xbar: DVector<f64>, diverged_at: Option<u64>) -> Trace {
        let diverged_at = diverged_at.or_else(|| {
            // the final boundary update can still overflow
            (!(xbar.norm() <= DIVERGENCE_THRESHOLD)).then(|| cfg.total_iterations())
        });
        Trace {
            config: cfg.clone(),
            records: self.records,
            queries_per_worker: diverged_at.map_or(cfg.total_iterations(), |t| t.min(cfg.total_iterations())),
            diverged_at,
            final_iterate: xbar,
        }
    }
}

// Worker iterates, with a flag for the common case that all are equal.
struct Workers {
    iterates: Vec<DVector<f64>>,
    synced: Option<DVector<f64>>,
}

impl Workers {
    fn synchronized(x: DVector<f64>, n: usize) -> Self {
        Workers {
            iterates: vec![x.clone(); n],
            synced: Some(x),
        }
    }

    fn broadcast(&mut self, x: DVector<f64>) {
        for it in &mut self.iterates {
            it.copy_from(&x);
        }
        self.synced = Some(x);
    }

    /// Average iterate and consensus distance.
    fn average(&self) -> (DVector<f64>, f64) {
        match &self.synced {
            Some(x) => (x.clone(), 0.0),
            None => {
                let mean = pairwise_mean(&self.iterates);
                let spread = self.iterates.iter().map(|x| (x - &mean).norm_squared()).sum::<f64>()
                    / self.iterates.len() as f64;
                (mean, spread)
            }
        }
    }
}

fn check(cfg: &RunConfig, p: &ProblemInstance, expected: Algorithm) -> Result<()> {
    if cfg.algorithm != expected {
        return Err(Error::Config(format!(
            "config is for {} but {} was requested",
            cfg.algorithm, expected
        )));
    }
    cfg.validate(p.dimension())
}

// x_start - (eta / n) * sum_j acc_j, with the worker sum taken pairwise
fn aggregate(start: &DVector<f64>, eta: f64, acc: &[DVector<f64>]) -> DVector<f64> {
    start - pairwise_sum(acc) * (eta / acc.len() as f64)
}

/// Runs the algorithm named in `cfg`.
pub fn run(p: &ProblemInstance, cfg: &RunConfig) -> Result<Trace> {
    match cfg.algorithm {
        Algorithm::Mbsgd => run_mbsgd(p, cfg),
        Algorithm::Localsgd => run_localsgd(p, cfg),
        Algorithm::Scaffold => run_scaffold(p, cfg),
    }
}

/// Minibatch SGD: every worker queries `tau` times at the frozen round-start
/// point; the round moves by `eta` times the worker-averaged gradient sum.
pub fn run_mbsgd(p: &ProblemInstance, cfg: &RunConfig) -> Result<Trace> {
    check(cfg, p, Algorithm::Mbsgd)?;
    let n = p.num_workers();
    let d = p.dimension();
    let mut rec = Recorder::new(p, cfg);
    let mut x = DVector::from_column_slice(&cfg.init);

    for r in 0..cfg.rounds {
        let exact = (0..n).map(|i| p.local_grad(i, &x)).collect::<Result<Vec<_>>>()?;
        let mut acc = vec![DVector::zeros(d); n];
        for k in 0..cfg.tau {
            let t = r * cfg.tau + k;
            if let Step::Diverged = rec.observe(t, &x, 0.0, k > 0)? {
                return Ok(rec.finish(cfg, x, Some(t)));
            }
            for (i, a) in acc.iter_mut().enumerate() {
                let mut g = exact[i].clone();
                if cfg.oracle.effective_sigma() > 0.0 {
                    g += noise(&cfg.oracle, QueryKey::new(i, t), d);
                }
                *a += g;
            }
        }
        x = aggregate(&x, cfg.eta, &acc);
    }
    Ok(rec.finish(cfg, x, None))
}

/// Local SGD: `tau - 1` local steps per round, then averaging.
pub fn run_localsgd(p: &ProblemInstance, cfg: &RunConfig) -> Result<Trace> {
    check(cfg, p, Algorithm::Localsgd)?;
    let n = p.num_workers();
    let d = p.dimension();
    let mut rec = Recorder::new(p, cfg);
    let mut start = DVector::from_column_slice(&cfg.init);
    let mut workers = Workers::synchronized(start.clone(), n);

    for r in 0..cfg.rounds {
        let mut acc = vec![DVector::zeros(d); n];
        for k in 0..cfg.tau {
            let t = r * cfg.tau + k;
            let (xbar, xi) = workers.average();
            if let Step::Diverged = rec.observe(t, &xbar, xi, false)? {
                return Ok(rec.finish(cfg, xbar, Some(t)));
            }
            let last = k + 1 == cfg.tau;
            for (i, (x, a)) in workers.iterates.iter_mut().zip(acc.iter_mut()).enumerate() {
                let g = sample_gradient(p, &cfg.oracle, QueryKey::new(i, t), x)?;
                if !last {
                    x.axpy(-cfg.eta, &g, 1.0);
                }
                *a += g;
            }
            if !last {
                workers.synced = None;
            }
        }
        start = aggregate(&start, cfg.eta, &acc);
        workers.broadcast(start.clone());
    }
    Ok(rec.finish(cfg, start, None))
}

/// SCAFFOLD with control variates from a dedicated first phase.
///
/// Each outer loop spans two communication rounds (`2 tau` iterations). In
/// the first phase the iterates stay at the broadcast point while every
/// worker averages its `tau` gradients into a local control variate, whose
/// worker mean is broadcast. The second phase takes `tau - 1` corrected
/// steps `x -= eta (g - c_i + c)`; its last gradient only enters the
/// aggregate `x_start - (eta / n) sum_j sum_phase2 g`.
pub fn run_scaffold(p: &ProblemInstance, cfg: &RunConfig) -> Result<Trace> {
    check(cfg, p, Algorithm::Scaffold)?;
    let n = p.num_workers();
    let d = p.dimension();
    let tau = cfg.tau;
    let mut rec = Recorder::new(p, cfg);
    let mut start = DVector::from_column_slice(&cfg.init);
    let mut workers = Workers::synchronized(start.clone(), n);

    for r in 0..cfg.rounds {
        let base = 2 * r * tau;

        let exact = (0..n).map(|i| p.local_grad(i, &start)).collect::<Result<Vec<_>>>()?;
        let mut control = vec![DVector::zeros(d); n];
        for k in 0..tau {
            let t = base + k;
            if let Step::Diverged = rec.observe(t, &start, 0.0, k > 0)? {
                return Ok(rec.finish(cfg, start, Some(t)));
            }
            for (i, c) in control.iter_mut().enumerate() {
                let mut g = exact[i].clone();
                if cfg.oracle.effective_sigma() > 0.0 {
                    g += noise(&cfg.oracle, QueryKey::new(i, t), d);
                }
                *c += g;
            }
        }
        for c in &mut control {
            *c /= tau as f64;
        }
        let global_control = pairwise_mean(&control);

        let mut acc = vec![DVector::zeros(d); n];
        for k in tau..2 * tau {
            let t = base + k;
            let (xbar, xi) = workers.average();
            if let Step::Diverged = rec.observe(t, &xbar, xi, k == tau)? {
                return Ok(rec.finish(cfg, xbar, Some(t)));
            }
            let last = k + 1 == 2 * tau;
            for (i, (x, a)) in workers.iterates.iter_mut().zip(acc.iter_mut()).enumerate() {
                let g = sample_gradient(p, &cfg.oracle, QueryKey::new(i, t), x)?;
                if !last {
                    let corrected = (&g - &control[i]) + &global_control;
                    x.axpy(-cfg.eta, &corrected, 1.0);
                }
                *a += g;
            }
            if !last {
                workers.synced = None;
            }
        }
        start = aggregate(&start, cfg.eta, &acc);
        workers.broadcast(start.clone());
    }
    Ok(rec.finish(cfg, start, None))
}
