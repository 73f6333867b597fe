//! The four reproduction experiments and their qualitative verdicts.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{ensure_dir, fmt_f64, read_text, write_json, write_text};
use super::plot::{render_plot_svg, Curve};
use super::{metric_value, tune_problem, AlgorithmTuning, ExperimentSpec, Persist, ProblemSource};
use crate::algorithms::{Algorithm, MetricKind};
use crate::error::{Error, Result};
use crate::problem::{generate_problem, AchievedConditioning, GenerationSpec, ProblemInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Figure {
    Fig1Left,
    Fig1Right,
    Fig2,
    Fig3,
}

impl Figure {
    pub const ALL: [Figure; 4] = [Figure::Fig1Left, Figure::Fig1Right, Figure::Fig2, Figure::Fig3];

    pub fn name(self) -> &'static str {
        match self {
            Figure::Fig1Left => "fig1_left",
            Figure::Fig1Right => "fig1_right",
            Figure::Fig2 => "fig2",
            Figure::Fig3 => "fig3",
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown figure `{s}` (expected fig1_left, fig1_right, fig2 or fig3)")))
    }
}

/// Shared experiment settings. The defaults are the full-size setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceOptions {
    pub dimension: usize,
    pub num_workers: usize,
    /// Seed of every generated instance; the oracle seeds vary per run.
    pub instance_seed: u64,
    pub seeds: Vec<u64>,
    pub stepsize_grid: Vec<f64>,
    pub tau: u64,
    pub rounds: u64,
    /// Protocol round at which the optimization-dominated checks look.
    pub early_round: u64,
    pub sigma: f64,
}

impl Default for ReproduceOptions {
    fn default() -> Self {
        ReproduceOptions {
            dimension: 100,
            num_workers: 10,
            instance_seed: 1,
            seeds: super::DEFAULT_SEEDS.to_vec(),
            stepsize_grid: super::DEFAULT_GRID.to_vec(),
            tau: super::DEFAULT_TAU,
            rounds: 50,
            early_round: 10,
            sigma: 0.01,
        }
    }
}

impl ReproduceOptions {
    fn validate(&self) -> Result<()> {
        if self.early_round == 0 || self.early_round > self.rounds || self.rounds % 2 != 0 {
            return Err(Error::Config(format!(
                "need an even number of rounds and 1 <= early_round <= rounds, got {} and {}",
                self.rounds, self.early_round
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Parameter {
    Zeta,
    Delta,
    Lambda,
}

impl Parameter {
    fn name(self) -> &'static str {
        match self {
            Parameter::Zeta => "zeta",
            Parameter::Delta => "delta",
            Parameter::Lambda => "lambda",
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Parameter::Zeta => "ζ",
            Parameter::Delta => "δ",
            Parameter::Lambda => "λ",
        }
    }
}

/// How the anchor spread of a sweep's instances is set.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Spread {
    /// Calibrate to this zeta.
    Target(f64),
    /// Reuse the spread calibrated for zeta on the base instance (the first
    /// sweep value), so only the swept knob moves.
    FromBase(f64),
    /// No spread.
    None,
}

#[derive(Debug, Clone, Copy)]
struct Base {
    spread: Spread,
    delta: f64,
    lambda: f64,
}

struct Sweep {
    name: &'static str,
    parameter: Parameter,
    values: [f64; 3],
    base: Base,
    algorithms: Vec<Algorithm>,
}

fn sweeps(figure: Figure) -> Vec<Sweep> {
    use Algorithm::*;
    let left = Base {
        spread: Spread::FromBase(0.03),
        delta: 0.01,
        lambda: 0.01,
    };
    let calibrated = Base {
        spread: Spread::Target(0.03),
        ..left
    };
    let right = Base {
        spread: Spread::None,
        delta: 0.1,
        lambda: 0.01,
    };
    let delta_left = [0.01, 0.02, 0.03];
    let delta_right = [0.1, 0.2, 0.3];
    let lambdas = [0.01, 0.02, 0.03];
    match figure {
        Figure::Fig1Left => vec![Sweep {
            name: "delta",
            parameter: Parameter::Delta,
            values: delta_left,
            base: left,
            algorithms: vec![Mbsgd, Localsgd],
        }],
        Figure::Fig1Right => vec![Sweep {
            name: "delta",
            parameter: Parameter::Delta,
            values: delta_right,
            base: right,
            algorithms: vec![Mbsgd, Scaffold],
        }],
        Figure::Fig2 => vec![
            Sweep {
                name: "zeta",
                parameter: Parameter::Zeta,
                values: [0.03, 0.05, 0.07],
                base: calibrated,
                algorithms: vec![Localsgd],
            },
            Sweep {
                name: "delta",
                parameter: Parameter::Delta,
                values: delta_left,
                base: left,
                algorithms: vec![Localsgd],
            },
            Sweep {
                name: "lambda",
                parameter: Parameter::Lambda,
                values: lambdas,
                base: calibrated,
                algorithms: vec![Localsgd],
            },
        ],
        Figure::Fig3 => vec![
            Sweep {
                name: "delta",
                parameter: Parameter::Delta,
                values: delta_right,
                base: right,
                algorithms: vec![Scaffold],
            },
            Sweep {
                name: "lambda",
                parameter: Parameter::Lambda,
                values: lambdas,
                base: right,
                algorithms: vec![Scaffold],
            },
        ],
    }
}

/// One point of a seed-mean metric curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sweep: &'static str,
    pub algorithm: Algorithm,
    pub value: f64,
    pub round: u64,
    pub metric: f64,
}

const CURVE_HEADER: &str = "sweep,algorithm,value,round,metric";

fn curves_to_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            p.sweep,
            p.algorithm,
            fmt_f64(p.value),
            p.round,
            fmt_f64(p.metric)
        ));
    }
    s
}

fn sweep_name(s: &str) -> Result<&'static str> {
    ["zeta", "delta", "lambda"]
        .into_iter()
        .find(|n| *n == s)
        .ok_or_else(|| Error::Csv(format!("unknown sweep `{s}`")))
}

/// Parses a `curves.csv` written by [`reproduce_figure`].
pub fn curves_from_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CURVE_HEADER) {
        return Err(Error::Csv(format!("expected header `{CURVE_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<_> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Csv(format!("expected 5 fields in `{line}`")));
            }
            let bad = || Error::Csv(format!("malformed line `{line}`"));
            Ok(CurvePoint {
                sweep: sweep_name(f[0])?,
                algorithm: f[1].parse()?,
                value: f[2].parse().map_err(|_| bad())?,
                round: f[3].parse().map_err(|_| bad())?,
                metric: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// Metric strictly increasing along the sweep.
    StrictlyIncreasing,
    /// Every metric within 20% of the mean over the sweep.
    WithinTwentyPercent,
    /// Positive least-squares slope of metric against the swept value.
    PositiveSlope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub sweep: String,
    pub algorithm: Algorithm,
    pub check: Check,
    pub round: u64,
    pub values: Vec<f64>,
    pub metrics: Vec<f64>,
    /// Slope for slope checks, largest relative deviation for spread checks,
    /// smallest consecutive increase otherwise.
    pub statistic: f64,
    pub passed: bool,
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn evaluate(check: Check, values: &[f64], metrics: &[f64]) -> (f64, bool) {
    let finite = metrics.iter().all(|m| m.is_finite());
    match check {
        Check::StrictlyIncreasing => {
            let min_step = metrics.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            (min_step, finite && min_step > 0.0)
        }
        Check::WithinTwentyPercent => {
            let mean = metrics.iter().sum::<f64>() / metrics.len() as f64;
            let dev = metrics.iter().map(|m| (m - mean).abs() / mean).fold(0.0, f64::max);
            (dev, finite && dev <= 0.2)
        }
        Check::PositiveSlope => {
            let slope = ls_slope(values, metrics);
            (slope, finite && slope > 0.0)
        }
    }
}

// (sweep, algorithm, check, round) for every verdict of a figure
fn verdict_plan(figure: Figure, opts: &ReproduceOptions) -> Vec<(&'static str, Algorithm, Check, u64)> {
    let (late, early) = (opts.rounds, opts.early_round);
    match figure {
        Figure::Fig1Left => vec![
            ("delta", Algorithm::Localsgd, Check::StrictlyIncreasing, late),
            ("delta", Algorithm::Mbsgd, Check::WithinTwentyPercent, late),
        ],
        Figure::Fig1Right => vec![
            ("delta", Algorithm::Scaffold, Check::StrictlyIncreasing, early),
            ("delta", Algorithm::Mbsgd, Check::WithinTwentyPercent, late),
        ],
        Figure::Fig2 => ["zeta", "delta", "lambda"]
            .into_iter()
            .map(|s| (s, Algorithm::Localsgd, Check::PositiveSlope, late))
            .collect(),
        Figure::Fig3 => ["delta", "lambda"]
            .into_iter()
            .map(|s| (s, Algorithm::Scaffold, Check::PositiveSlope, early))
            .collect(),
    }
}

/// Recomputes the verdicts of `figure` from its curve data alone.
pub fn verdicts_from_curves(figure: Figure, opts: &ReproduceOptions, points: &[CurvePoint]) -> Result<Vec<Verdict>> {
    verdict_plan(figure, opts)
        .into_iter()
        .map(|(sweep, algorithm, check, round)| {
            let mut sel: Vec<_> = points
                .iter()
                .filter(|p| p.sweep == sweep && p.algorithm == algorithm && p.round == round)
                .collect();
            sel.sort_by(|a, b| a.value.total_cmp(&b.value));
            if sel.len() < 2 {
                return Err(Error::Precondition(format!(
                    "{figure}: no curve data for {algorithm} over {sweep} at round {round}"
                )));
            }
            let values: Vec<_> = sel.iter().map(|p| p.value).collect();
            let metrics: Vec<_> = sel.iter().map(|p| p.metric).collect();
            let (statistic, passed) = evaluate(check, &values, &metrics);
            Ok(Verdict {
                sweep: sweep.to_owned(),
                algorithm,
                check,
                round,
                values,
                metrics,
                statistic,
                passed,
            })
        })
        .collect()
}

/// Tuned result of one algorithm on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Series {
    tuning: AlgorithmTuning,
    /// Seed-mean metric after protocol rounds `1..=rounds`.
    curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub sweep: String,
    pub value: f64,
    pub spec: GenerationSpec,
    pub achieved: Option<AchievedConditioning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub sweep: String,
    pub value: f64,
    pub tuning: AlgorithmTuning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureReport {
    pub figure: Figure,
    pub options: ReproduceOptions,
    pub metric: MetricKind,
    pub instances: Vec<InstanceSummary>,
    pub tuning: Vec<SeriesSummary>,
    pub verdicts: Vec<Verdict>,
    pub passed: bool,
}

fn spec_key(spec: &GenerationSpec) -> String {
    serde_json::to_string(spec).expect("generation specs serialize")
}

/// Instances and tuned series shared between figures of one reproduction.
#[derive(Default)]
pub struct Lab {
    options: ReproduceOptions,
    instances: HashMap<String, Arc<ProblemInstance>>,
    series: HashMap<(String, Algorithm), Series>,
}

impl Lab {
    pub fn new(options: ReproduceOptions) -> Result<Self> {
        options.validate()?;
        Ok(Lab {
            options,
            ..Default::default()
        })
    }

    fn generation(&self, spread: Spread, delta: f64, lambda: f64) -> GenerationSpec {
        let mut spec = GenerationSpec::experiment(self.options.instance_seed, None, delta, lambda);
        spec.dimension = self.options.dimension;
        spec.num_workers = self.options.num_workers;
        match spread {
            Spread::Target(z) => spec.target_zeta = Some(z),
            Spread::FromBase(_) | Spread::None => {}
        }
        spec
    }

    fn instances(&mut self, specs: &[GenerationSpec]) -> Result<Vec<Arc<ProblemInstance>>> {
        let missing: Vec<_> = specs
            .iter()
            .filter(|s| !self.instances.contains_key(&spec_key(s)))
            .copied()
            .collect();
        let built = missing
            .par_iter()
            .map(|s| {
                generate_problem(s).map_err(|e| {
                    e.context(format!(
                        "generating zeta {:?}, delta {}, lambda {}",
                        s.target_zeta, s.target_delta, s.reg_weight
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for (s, p) in missing.iter().zip(built) {
            self.instances.insert(spec_key(s), Arc::new(p));
        }
        Ok(specs.iter().map(|s| Arc::clone(&self.instances[&spec_key(s)])).collect())
    }

    // generation specs of a sweep, in sweep order
    fn sweep_specs(&mut self, sweep: &Sweep) -> Result<Vec<GenerationSpec>> {
        let Base { spread, delta, lambda } = sweep.base;
        let at = |v: f64| match sweep.parameter {
            Parameter::Zeta => (Spread::Target(v), delta, lambda),
            Parameter::Delta => (spread, v, lambda),
            Parameter::Lambda => (spread, delta, v),
        };
        let mut specs: Vec<_> = sweep
            .values
            .iter()
            .map(|&v| {
                let (s, d, l) = at(v);
                self.generation(s, d, l)
            })
            .collect();
        if let Spread::FromBase(zeta) = spread {
            // the base instance calibrates zeta; the rest reuse its spread
            let (_, d0, l0) = at(sweep.values[0]);
            let base = self.generation(Spread::Target(zeta), d0, l0);
            let p = self.instances(&[base])?.remove(0);
            let s = p.achieved.map(|a| a.spread_scale).unwrap_or(0.0);
            specs[0] = base;
            for spec in &mut specs[1..] {
                spec.spread_scale = Some(s);
            }
        }
        Ok(specs)
    }

    fn series(&mut self, spec: &GenerationSpec, p: &ProblemInstance, algorithm: Algorithm) -> Result<Series> {
        let key = (spec_key(spec), algorithm);
        if let Some(s) = self.series.get(&key) {
            return Ok(s.clone());
        }
        let o = &self.options;
        let exp = ExperimentSpec {
            problem: ProblemSource::Generate(*spec),
            algorithms: vec![algorithm],
            tau: o.tau,
            rounds: o.rounds,
            stepsize_grid: o.stepsize_grid.clone(),
            seeds: o.seeds.clone(),
            sigma: o.sigma,
            metric: MetricKind::AvgGradNormSq,
            output_dir: Default::default(),
        };
        let (result, runs) = tune_problem(&exp, p, Persist::Nothing)?;
        let tuning = result.algorithms.into_iter().next().expect("one algorithm");
        let chosen: Vec<_> = runs.iter().filter(|r| r.eta == tuning.chosen).collect();
        let curve = (1..=o.rounds)
            .map(|r| {
                let vals = chosen
                    .iter()
                    .map(|c| metric_value(&c.trace, MetricKind::AvgGradNormSq, 0.0, Some(r * o.tau)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect::<Result<Vec<_>>>()?;
        let s = Series { tuning, curve };
        self.series.insert(key, s.clone());
        Ok(s)
    }

    /// Runs `figure`, writes its artifacts under `out/<figure>/`, and returns
    /// the report. Verdicts are computed from the written curve data.
    pub fn reproduce(&mut self, figure: Figure, out: &Path) -> Result<FigureReport> {
        let dir = out.join(figure.name());
        ensure_dir(&dir)?;
        let mut points = Vec::new();
        let mut instances = Vec::new();
        let mut tuning = Vec::new();
        for sweep in sweeps(figure) {
            let specs = self.sweep_specs(&sweep)?;
            let problems = self.instances(&specs)?;
            let mut curves = Vec::new();
            for ((spec, p), &value) in specs.iter().zip(&problems).zip(&sweep.values) {
                instances.push(InstanceSummary {
                    sweep: sweep.name.to_owned(),
                    value,
                    spec: *spec,
                    achieved: p.achieved,
                });
                for &a in &sweep.algorithms {
                    let s = self
                        .series(spec, p, a)
                        .map_err(|e| e.context(format!("{figure}: {a} at {} = {value}", sweep.name)))?;
                    for (k, &m) in s.curve.iter().enumerate() {
                        points.push(CurvePoint {
                            sweep: sweep.name,
                            algorithm: a,
                            value,
                            round: k as u64 + 1,
                            metric: m,
                        });
                    }
                    curves.push(Curve {
                        label: format!("{a}, {}={value}", sweep.parameter.symbol()),
                        points: s.curve.iter().enumerate().map(|(k, &m)| ((k + 1) as f64, m)).collect(),
                    });
                    tuning.push(SeriesSummary {
                        sweep: sweep.name.to_owned(),
                        value,
                        tuning: s.tuning,
                    });
                }
            }
            render_plot_svg(
                &format!("{figure}: sweep over {}", sweep.parameter.name()),
                "communication round",
                "average squared gradient norm",
                &curves,
                &dir.join(format!("{}.svg", sweep.name)),
            )?;
        }
        let csv_path = dir.join("curves.csv");
        write_text(&csv_path, &curves_to_csv(&points))?;
        // verdicts are a pure function of the persisted curves
        let persisted = curves_from_csv(&read_text(&csv_path)?)?;
        let verdicts = verdicts_from_curves(figure, &self.options, &persisted)?;
        let report = FigureReport {
            figure,
            options: self.options.clone(),
            metric: MetricKind::AvgGradNormSq,
            instances,
            tuning,
            passed: verdicts.iter().all(|v| v.passed),
            verdicts,
        };
        write_json(&dir.join("verdict.json"), &report.verdicts)?;
        write_json(&dir.join("summary.json"), &report)?;
        Ok(report)
    }
}

/// Reproduces one figure with fresh caches.
pub fn reproduce_figure(figure: Figure, options: &ReproduceOptions, out: &Path) -> Result<FigureReport> {
    Lab::new(options.clone())?.reproduce(figure, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_line() {
        assert!((ls_slope(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 2.0).abs() < 1e-15);
        assert!(ls_slope(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) < 0.0);
    }

    #[test]
    fn checks() {
        assert!(evaluate(Check::StrictlyIncreasing, &[], &[1.0, 2.0, 3.0]).1);
        assert!(!evaluate(Check::StrictlyIncreasing, &[], &[1.0, 1.0, 3.0]).1);
        assert!(evaluate(Check::WithinTwentyPercent, &[], &[1.0, 1.1, 0.9]).1);
        assert!(!evaluate(Check::WithinTwentyPercent, &[], &[1.0, 2.0, 0.9]).1);
        assert!(!evaluate(Check::PositiveSlope, &[1.0, 2.0], &[1.0, f64::INFINITY]).1);
    }

    #[test]
    fn curve_csv_round_trips() {
        let pts = vec![
            CurvePoint {
                sweep: "delta",
                algorithm: Algorithm::Localsgd,
                value: 0.01,
                round: 1,
                metric: 1.0 / 3.0,
            },
            CurvePoint {
                sweep: "lambda",
                algorithm: Algorithm::Scaffold,
                value: 0.03,
                round: 10,
                metric: f64::INFINITY,
            },
        ];
        assert_eq!(curves_from_csv(&curves_to_csv(&pts)).unwrap(), pts);
    }

    #[test]
    fn figure_names_round_trip() {
        for f in Figure::ALL {
            assert_eq!(f.name().parse::<Figure>().unwrap(), f);
        }
        assert!("fig4".parse::<Figure>().is_err());
    }
}
