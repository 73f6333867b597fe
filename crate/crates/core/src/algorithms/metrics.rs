use serde::{Deserialize, Serialize};

use super::{Algorithm, Trace, TraceRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    AvgGradNormSq,
    ScaffoldPhase2,
    AvgSuboptimality,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    /// Averaged over a strided subset of the iterations.
    pub approximate: bool,
}

fn nonempty(trace: &Trace) -> Result<()> {
    if trace.records.is_empty() && !trace.diverged() {
        return Err(Error::EmptyTrace);
    }
    Ok(())
}

fn mean_of(records: &[TraceRecord], f: impl Fn(&TraceRecord) -> f64) -> f64 {
    records.iter().map(f).sum::<f64>() / records.len() as f64
}

/// Mean of the recorded `|grad f(xbar_t)|^2`; `+inf` for a diverged run.
pub fn metric_avg_grad_norm_sq(trace: &Trace) -> Result<MetricValue> {
    nonempty(trace)?;
    let value = if trace.diverged() {
        f64::INFINITY
    } else {
        mean_of(&trace.records, |r| r.grad_norm_sq)
    };
    Ok(MetricValue {
        value,
        approximate: trace.config.record_every != 1,
    })
}

fn require_phase2(trace: &Trace) -> Result<()> {
    if trace.algorithm() != Algorithm::Scaffold {
        return Err(Error::Precondition(format!(
            "the second-phase metric needs a scaffold trace, got {}",
            trace.algorithm()
        )));
    }
    if trace.config.record_every != 1 {
        return Err(Error::Precondition("the second-phase metric needs record_every = 1".into()));
    }
    Ok(())
}

fn phase2_sum(trace: &Trace, t_end: u64) -> f64 {
    let tau = trace.config.tau;
    trace
        .records
        .iter()
        .filter(|r| r.t < t_end && r.t % (2 * tau) >= tau)
        .map(|r| r.grad_norm_sq)
        .sum()
}

/// `(2/T) sum` of `|grad f(xbar_t)|^2` over the second-phase iterations of
/// every SCAFFOLD outer loop; `+inf` for a diverged run.
pub fn metric_scaffold_phase2(trace: &Trace) -> Result<f64> {
    require_phase2(trace)?;
    nonempty(trace)?;
    if trace.diverged() {
        return Ok(f64::INFINITY);
    }
    let total = trace.config.total_iterations();
    Ok(2.0 / total as f64 * phase2_sum(trace, total))
}

/// Mean of `f(xbar_t) - f_star`; may be negative when `f_star` overshoots.
pub fn metric_avg_suboptimality(trace: &Trace, f_star: f64) -> Result<MetricValue> {
    nonempty(trace)?;
    let value = if trace.diverged() {
        f64::INFINITY
    } else {
        mean_of(&trace.records, |r| r.f_value) - f_star
    };
    Ok(MetricValue {
        value,
        approximate: trace.config.record_every != 1,
    })
}

/// `kind` restricted to the iterations `t < t_end`, as if the run had been
/// stopped there. `+inf` once the prefix reaches a divergence.
pub fn prefix_metric(trace: &Trace, kind: MetricKind, f_star: f64, t_end: u64) -> Result<f64> {
    if t_end == 0 || t_end > trace.config.total_iterations() {
        return Err(Error::Precondition(format!(
            "prefix end {t_end} outside 1..={}",
            trace.config.total_iterations()
        )));
    }
    if kind == MetricKind::ScaffoldPhase2 {
        require_phase2(trace)?;
    }
    if trace.diverged_at.is_some_and(|t| t < t_end) {
        return Ok(f64::INFINITY);
    }
    let prefix: Vec<_> = trace.records.iter().copied().filter(|r| r.t < t_end).collect();
    if prefix.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok(match kind {
        MetricKind::AvgGradNormSq => mean_of(&prefix, |r| r.grad_norm_sq),
        MetricKind::AvgSuboptimality => mean_of(&prefix, |r| r.f_value) - f_star,
        MetricKind::ScaffoldPhase2 => 2.0 / t_end as f64 * phase2_sum(trace, t_end),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::RunConfig;
    use crate::oracle::OracleConfig;
    use nalgebra::DVector;

    fn trace(algorithm: Algorithm, tau: u64, rounds: u64, g: &[f64]) -> Trace {
        let config = RunConfig::new(algorithm, 0.1, tau, rounds, vec![0.0], OracleConfig::exact());
        Trace {
            records: g
                .iter()
                .enumerate()
                .map(|(t, &v)| TraceRecord {
                    t: t as u64,
                    round: t as u64 / tau,
                    grad_norm_sq: v,
                    f_value: 2.0 * v,
                    consensus_sq: 0.0,
                })
                .collect(),
            queries_per_worker: config.total_iterations(),
            config,
            diverged_at: None,
            final_iterate: DVector::zeros(1),
        }
    }

    #[test]
    fn averages_and_single_record() {
        let t = trace(Algorithm::Localsgd, 2, 1, &[1.0, 0.25]);
        assert_eq!(metric_avg_grad_norm_sq(&t).unwrap().value, 0.625);
        let t = trace(Algorithm::Localsgd, 1, 1, &[0.7]);
        assert_eq!(metric_avg_grad_norm_sq(&t).unwrap().value, 0.7);
        assert_eq!(metric_avg_suboptimality(&t, 0.0).unwrap().value, 1.4);
        assert_eq!(metric_avg_suboptimality(&t, 2.0).unwrap().value, 1.4 - 2.0);
    }

    #[test]
    fn phase2_selects_second_half_of_each_loop() {
        let t = trace(Algorithm::Scaffold, 2, 1, &[1.0, 1.0, 1.0, 0.25]);
        assert_eq!(metric_scaffold_phase2(&t).unwrap(), 0.625);
        let t = trace(Algorithm::Scaffold, 1 + 1, 2, &[9.0, 9.0, 1.0, 1.0, 9.0, 9.0, 2.0, 0.0]);
        assert_eq!(metric_scaffold_phase2(&t).unwrap(), 2.0 / 8.0 * 4.0);
        assert_eq!(prefix_metric(&t, MetricKind::ScaffoldPhase2, 0.0, 4).unwrap(), 1.0);
    }

    #[test]
    fn phase2_rejects_other_algorithms() {
        let t = trace(Algorithm::Mbsgd, 2, 1, &[1.0, 1.0]);
        assert!(matches!(metric_scaffold_phase2(&t), Err(Error::Precondition(_))));
    }

    #[test]
    fn empty_trace_is_an_error() {
        let mut t = trace(Algorithm::Localsgd, 2, 1, &[]);
        assert!(matches!(metric_avg_grad_norm_sq(&t), Err(Error::EmptyTrace)));
        t.diverged_at = Some(0);
        assert_eq!(metric_avg_grad_norm_sq(&t).unwrap().value, f64::INFINITY);
    }

    #[test]
    fn prefix_before_divergence_is_finite() {
        let mut t = trace(Algorithm::Localsgd, 2, 2, &[1.0, 3.0]);
        t.diverged_at = Some(2);
        assert_eq!(prefix_metric(&t, MetricKind::AvgGradNormSq, 0.0, 2).unwrap(), 2.0);
        assert_eq!(prefix_metric(&t, MetricKind::AvgGradNormSq, 0.0, 3).unwrap(), f64::INFINITY);
        assert!(prefix_metric(&t, MetricKind::AvgGradNormSq, 0.0, 5).is_err());
    }
}
