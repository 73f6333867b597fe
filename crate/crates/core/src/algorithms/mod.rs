//! Trajectory engines for minibatch SGD, local SGD and SCAFFOLD on the
//! intermittent-communication schedule, plus the suboptimality metrics.

mod engine;
mod metrics;

pub use engine::{run, run_localsgd, run_mbsgd, run_scaffold, DIVERGENCE_THRESHOLD};
pub use metrics::{
    metric_avg_grad_norm_sq, metric_avg_suboptimality, metric_scaffold_phase2, prefix_metric, MetricKind,
    MetricValue,
};

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::OracleConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Mbsgd,
    Localsgd,
    Scaffold,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Mbsgd, Algorithm::Localsgd, Algorithm::Scaffold];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mbsgd => "mbsgd",
            Algorithm::Localsgd => "localsgd",
            Algorithm::Scaffold => "scaffold",
        }
    }

    /// Communication rounds consumed per outer loop.
    pub fn rounds_per_loop(self) -> u64 {
        match self {
            Algorithm::Scaffold => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}` (expected mbsgd, localsgd or scaffold)")))
    }
}

fn default_record_every() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub tau: u64,
    /// Outer loops: communication rounds for MbSGD and LocalSGD, double
    /// rounds for SCAFFOLD.
    pub rounds: u64,
    pub init: Vec<f64>,
    pub oracle: OracleConfig,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, eta: f64, tau: u64, rounds: u64, init: Vec<f64>, oracle: OracleConfig) -> Self {
        RunConfig {
            algorithm,
            eta,
            tau,
            rounds,
            init,
            oracle,
            record_every: 1,
        }
    }

    /// Oracle queries per worker.
    pub fn total_iterations(&self) -> u64 {
        self.algorithm.rounds_per_loop() * self.rounds * self.tau
    }

    /// Communication rounds of the protocol.
    pub fn protocol_rounds(&self) -> u64 {
        self.algorithm.rounds_per_loop() * self.rounds
    }

    pub fn validate(&self, dimension: usize) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.tau == 0 || self.rounds == 0 || self.record_every == 0 {
            return Err(Error::Config("tau, rounds and record_every must be positive".into()));
        }
        if self.algorithm == Algorithm::Scaffold && self.tau < 2 {
            return Err(Error::Config(format!("scaffold needs tau >= 2, got {}", self.tau)));
        }
        if self.init.len() != dimension {
            return Err(Error::Dimension {
                expected: dimension,
                actual: self.init.len(),
            });
        }
        if self.init.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("initial point must be finite".into()));
        }
        self.oracle.validate()
    }
}

/// One recorded iteration, evaluated at the worker average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub t: u64,
    /// Protocol communication round containing `t`.
    pub round: u64,
    pub grad_norm_sq: f64,
    pub f_value: f64,
    /// Mean squared distance of the worker iterates from their average.
    pub consensus_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub config: RunConfig,
    pub records: Vec<TraceRecord>,
    /// Iteration at which the run was aborted, if it diverged.
    pub diverged_at: Option<u64>,
    pub final_iterate: DVector<f64>,
    /// Oracle queries issued per worker.
    pub queries_per_worker: u64,
}

impl Trace {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn algorithm(&self) -> Algorithm {
        self.config.algorithm
    }
}
