//! Experiment orchestration: stepsize tuning over a grid and several
//! oracle seeds, figure reproduction, and persistence of the results.

mod figures;
pub mod io;
pub mod plot;

pub use figures::{
    curves_from_csv, reproduce_figure, verdicts_from_curves, Check, CurvePoint, Figure, FigureReport, InstanceSummary, Lab,
    ReproduceOptions, SeriesSummary, Verdict,
};
pub use io::{export_trace_csv, load_problem, save_problem, write_json};
pub use plot::{render_plot_svg, Curve};

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{metric_avg_grad_norm_sq, prefix_metric, run, Algorithm, MetricKind, RunConfig, Trace};
use crate::conditioning::approximate_fstar;
use crate::error::{Error, Result};
use crate::oracle::OracleConfig;
use crate::problem::{generate_problem, GenerationSpec, ProblemInstance};

pub const DEFAULT_GRID: [f64; 7] = [0.0003, 0.001, 0.003, 0.01, 0.03, 0.1, 0.3];
pub const DEFAULT_SEEDS: [u64; 3] = [111, 222, 333];
pub const DEFAULT_TAU: u64 = 50;

/// Where the problem of an experiment comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemSource {
    Bundle { bundle: PathBuf },
    Generate(GenerationSpec),
}

impl ProblemSource {
    pub fn load(&self) -> Result<ProblemInstance> {
        match self {
            ProblemSource::Bundle { bundle } => load_problem(bundle),
            ProblemSource::Generate(spec) => generate_problem(spec),
        }
    }
}

fn default_grid() -> Vec<f64> {
    DEFAULT_GRID.to_vec()
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn default_tau() -> u64 {
    DEFAULT_TAU
}

fn default_metric() -> MetricKind {
    MetricKind::AvgGradNormSq
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub problem: ProblemSource,
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_tau")]
    pub tau: u64,
    /// Protocol communication rounds; SCAFFOLD runs half as many outer loops.
    pub rounds: u64,
    #[serde(default = "default_grid")]
    pub stepsize_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub sigma: f64,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() || self.stepsize_grid.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("algorithms, stepsize_grid and seeds must be non-empty".into()));
        }
        if let Some(eta) = self.stepsize_grid.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return Err(Error::Config(format!("stepsizes must be positive, got {eta}")));
        }
        if self.tau == 0 || self.rounds == 0 {
            return Err(Error::Config("tau and rounds must be positive".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        for &a in &self.algorithms {
            if a == Algorithm::Scaffold && self.rounds % 2 != 0 {
                return Err(Error::Config(format!(
                    "scaffold needs an even number of rounds, got {}",
                    self.rounds
                )));
            }
        }
        if self.metric == MetricKind::ScaffoldPhase2 && self.algorithms.iter().any(|&a| a != Algorithm::Scaffold) {
            return Err(Error::Config("the scaffold_phase2 metric only applies to scaffold".into()));
        }
        Ok(())
    }

    /// Run configuration for one grid cell.
    pub fn run_config(&self, algorithm: Algorithm, eta: f64, seed: u64, dimension: usize) -> Result<RunConfig> {
        let oracle = OracleConfig::gaussian(self.sigma, seed)?;
        let loops = self.rounds / algorithm.rounds_per_loop();
        Ok(RunConfig::new(algorithm, eta, self.tau, loops, vec![0.0; dimension], oracle))
    }
}

/// Metric value of one run; `None` marks a diverged run (scored `+inf`).
pub type Score = Option<f64>;

fn score(v: f64) -> Score {
    v.is_finite().then_some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningCell {
    pub eta: f64,
    pub mean: Score,
    pub per_seed: Vec<Score>,
    pub diverged: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmTuning {
    pub algorithm: Algorithm,
    pub cells: Vec<TuningCell>,
    pub chosen: f64,
}

impl AlgorithmTuning {
    pub fn chosen_cell(&self) -> &TuningCell {
        self.cells
            .iter()
            .find(|c| c.eta == self.chosen)
            .expect("chosen stepsize comes from the grid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub metric: MetricKind,
    pub tau: u64,
    pub rounds: u64,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<AlgorithmTuning>,
}

impl TuningResult {
    pub fn for_algorithm(&self, a: Algorithm) -> Option<&AlgorithmTuning> {
        self.algorithms.iter().find(|t| t.algorithm == a)
    }
}

/// Which traces `tune` writes to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Persist {
    /// Every trace plus the tuning table.
    All,
    Nothing,
}

/// A finished grid cell run, kept for the caller.
pub struct CellRun {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub seed: u64,
    pub trace: Trace,
}

/// Value of `kind` on `trace`, either over the whole run or over the first
/// `t_end` iterations.
pub fn metric_value(trace: &Trace, kind: MetricKind, f_star: f64, t_end: Option<u64>) -> Result<f64> {
    match t_end {
        Some(t) => prefix_metric(trace, kind, f_star, t),
        None => match kind {
            MetricKind::AvgGradNormSq => Ok(metric_avg_grad_norm_sq(trace)?.value),
            _ => prefix_metric(trace, kind, f_star, trace.config.total_iterations()),
        },
    }
}

fn f_star_for(p: &ProblemInstance, kind: MetricKind) -> Result<f64> {
    if kind != MetricKind::AvgSuboptimality {
        return Ok(0.0);
    }
    let x0 = DVector::zeros(p.dimension());
    let l = crate::conditioning::estimate_l(p, &crate::conditioning::SamplerConfig::default().draw(p))?.value;
    Ok(approximate_fstar(p, &x0, l.max(f64::MIN_POSITIVE))?.value)
}

fn choose(cells: &[TuningCell]) -> Option<f64> {
    // ties go to the smaller stepsize
    let mut sorted: Vec<_> = cells.iter().collect();
    sorted.sort_by(|a, b| a.eta.total_cmp(&b.eta));
    let mut best: Option<(f64, f64)> = None;
    for c in sorted {
        if let Some(m) = c.mean {
            if best.is_none_or(|(_, bm)| m < bm) {
                best = Some((c.eta, m));
            }
        }
    }
    best.map(|(eta, _)| eta)
}

fn trace_name(algorithm: Algorithm, eta: f64, seed: u64) -> String {
    format!("{algorithm}_eta{eta}_seed{seed}")
}

/// Runs every (algorithm, stepsize, seed) cell on `p` and picks, per
/// algorithm, the stepsize with the smallest seed-mean metric.
pub fn tune_problem(spec: &ExperimentSpec, p: &ProblemInstance, persist: Persist) -> Result<(TuningResult, Vec<CellRun>)> {
    spec.validate()?;
    let f_star = f_star_for(p, spec.metric)?;
    let jobs: Vec<_> = spec
        .algorithms
        .iter()
        .flat_map(|&a| {
            spec.stepsize_grid
                .iter()
                .flat_map(move |&eta| spec.seeds.iter().map(move |&seed| (a, eta, seed)))
        })
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(algorithm, eta, seed)| -> Result<(CellRun, f64)> {
            let cfg = spec.run_config(algorithm, eta, seed, p.dimension())?;
            let trace = run(p, &cfg)?;
            let value = metric_value(&trace, spec.metric, f_star, None)?;
            Ok((
                CellRun {
                    algorithm,
                    eta,
                    seed,
                    trace,
                },
                value,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    if persist == Persist::All {
        let dir = spec.output_dir.join("traces");
        for (cell, _) in &runs {
            let name = trace_name(cell.algorithm, cell.eta, cell.seed);
            export_trace_csv(&cell.trace, &dir.join(format!("{name}.csv")))?;
            write_json(&dir.join(format!("{name}.json")), &io::RunMetadata::of(&cell.trace))?;
        }
    }

    let mut algorithms = Vec::new();
    let per_cell = spec.seeds.len();
    for (ai, &algorithm) in spec.algorithms.iter().enumerate() {
        let cells: Vec<_> = spec
            .stepsize_grid
            .iter()
            .enumerate()
            .map(|(ei, &eta)| {
                let start = (ai * spec.stepsize_grid.len() + ei) * per_cell;
                let slice = &runs[start..start + per_cell];
                let values: Vec<f64> = slice.iter().map(|(_, v)| *v).collect();
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                TuningCell {
                    eta,
                    mean: score(mean),
                    per_seed: values.iter().map(|&v| score(v)).collect(),
                    diverged: slice.iter().map(|(c, _)| c.trace.diverged()).collect(),
                }
            })
            .collect();
        let chosen = choose(&cells).ok_or_else(|| Error::AllDiverged {
            algorithm: algorithm.to_string(),
        })?;
        algorithms.push(AlgorithmTuning {
            algorithm,
            cells,
            chosen,
        });
    }
    let result = TuningResult {
        metric: spec.metric,
        tau: spec.tau,
        rounds: spec.rounds,
        seeds: spec.seeds.clone(),
        algorithms,
    };
    if persist == Persist::All {
        write_json(&spec.output_dir.join("tuning.json"), &result)?;
    }
    Ok((result, runs.into_iter().map(|(c, _)| c).collect()))
}

/// Loads or generates the spec's problem, tunes, and persists everything
/// under `spec.output_dir`.
pub fn tune(spec: &ExperimentSpec) -> Result<TuningResult> {
    spec.validate()?;
    let p = spec.problem.load().map_err(|e| e.context("preparing the problem"))?;
    let (result, _) = tune_problem(spec, &p, Persist::All)?;
    Ok(result)
}

/// Reads an experiment spec file; a relative `output_dir` stays relative to
/// the working directory.
pub fn read_spec(path: &Path) -> Result<ExperimentSpec> {
    io::read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::LocalObjective;
    use nalgebra::DMatrix;

    fn homogeneous() -> ProblemInstance {
        // identical scalar quadratic workers, curvature 2 near the anchor
        let l = LocalObjective::from_anchor(DMatrix::from_element(1, 1, 2f64.sqrt()), DVector::from_element(1, 0.3), 0.0)
            .unwrap();
        ProblemInstance::new(vec![l.clone(), l], 0).unwrap().with_row_weight(1.0)
    }

    fn spec(grid: Vec<f64>, dir: &Path) -> ExperimentSpec {
        ExperimentSpec {
            problem: ProblemSource::Bundle { bundle: "unused".into() },
            algorithms: vec![Algorithm::Localsgd],
            tau: 4,
            rounds: 6,
            stepsize_grid: grid,
            seeds: vec![1, 2],
            sigma: 0.0,
            metric: MetricKind::AvgGradNormSq,
            output_dir: dir.to_owned(),
        }
    }

    #[test]
    fn single_value_grid_is_chosen() {
        let dir = tempfile::tempdir().unwrap();
        let (r, _) = tune_problem(&spec(vec![0.05], dir.path()), &homogeneous(), Persist::Nothing).unwrap();
        assert_eq!(r.algorithms[0].chosen, 0.05);
    }

    #[test]
    fn diverged_cells_are_never_chosen() {
        let dir = tempfile::tempdir().unwrap();
        // curvature 2: eta = 1e13 blows up, eta = 0.4 converges
        let (r, _) = tune_problem(&spec(vec![0.4, 1e13], dir.path()), &homogeneous(), Persist::Nothing).unwrap();
        let t = &r.algorithms[0];
        assert_eq!(t.chosen, 0.4);
        assert_eq!(t.cells[1].mean, None);
        assert!(t.cells[1].diverged.iter().all(|&d| d));
        let err = tune_problem(&spec(vec![1e13], dir.path()), &homogeneous(), Persist::Nothing);
        assert!(matches!(err, Err(Error::AllDiverged { .. })));
    }

    #[test]
    fn ties_prefer_the_smaller_stepsize() {
        let cells: Vec<_> = [0.3, 0.1, 0.2]
            .iter()
            .map(|&eta| TuningCell {
                eta,
                mean: Some(1.0),
                per_seed: vec![],
                diverged: vec![],
            })
            .collect();
        assert_eq!(choose(&cells), Some(0.1));
    }

    #[test]
    fn persisted_tuning_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let grid = vec![0.01, 0.1];
        tune_problem(&spec(grid.clone(), a.path()), &homogeneous(), Persist::All).unwrap();
        tune_problem(&spec(grid, b.path()), &homogeneous(), Persist::All).unwrap();
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), "tuning.json"), read(b.path(), "tuning.json"));
        let name = "traces/localsgd_eta0.1_seed2.csv";
        assert_eq!(read(a.path(), name), read(b.path(), name));
    }

    #[test]
    fn scaffold_needs_even_rounds() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(vec![0.1], dir.path());
        s.algorithms = vec![Algorithm::Scaffold];
        s.rounds = 5;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }
}
