//! On-disk formats: problem bundles (JSON), trace CSV, and JSON summaries.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::algorithms::{Trace, TraceRecord};
use crate::error::{Error, Result};
use crate::problem::{AchievedConditioning, LocalObjective, ProblemInstance, RequestedConditioning};

pub const TRACE_HEADER: &str = "t,round,grad_norm_sq,f_value,consensus_sq";

/// 17 significant digits: enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::from(e).context(format!("parsing {}", path.display())))
}

pub fn trace_to_csv(records: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(96 * (records.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.t,
            r.round,
            fmt_f64(r.grad_norm_sq),
            fmt_f64(r.f_value),
            fmt_f64(r.consensus_sq)
        ));
    }
    out
}

pub fn trace_from_csv(text: &str) -> Result<Vec<TraceRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRACE_HEADER => {}
        other => return Err(Error::Csv(format!("expected header `{TRACE_HEADER}`, got {other:?}"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, line)| {
            let f: Vec<_> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Csv(format!("line {}: expected 5 fields, got {}", k + 2, f.len())));
            }
            let bad = |what: &str| Error::Csv(format!("line {}: bad {what}", k + 2));
            Ok(TraceRecord {
                t: f[0].parse().map_err(|_| bad("t"))?,
                round: f[1].parse().map_err(|_| bad("round"))?,
                grad_norm_sq: f[2].parse().map_err(|_| bad("grad_norm_sq"))?,
                f_value: f[3].parse().map_err(|_| bad("f_value"))?,
                consensus_sq: f[4].parse().map_err(|_| bad("consensus_sq"))?,
            })
        })
        .collect()
}

pub fn export_trace_csv(trace: &Trace, path: &Path) -> Result<()> {
    write_text(path, &trace_to_csv(&trace.records))
}

pub fn import_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    trace_from_csv(&read_text(path)?).map_err(|e| e.context(format!("reading {}", path.display())))
}

/// Run metadata written next to a trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: crate::algorithms::RunConfig,
    pub diverged_at: Option<u64>,
    pub queries_per_worker: u64,
    pub records: usize,
    pub final_iterate: Vec<f64>,
}

impl RunMetadata {
    pub fn of(trace: &Trace) -> Self {
        RunMetadata {
            config: trace.config.clone(),
            diverged_at: trace.diverged_at,
            queries_per_worker: trace.queries_per_worker,
            records: trace.records.len(),
            final_iterate: trace.final_iterate.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WorkerRecord {
    rows: usize,
    /// Row-major entries of `A_i`.
    data_matrix: Vec<f64>,
    targets: Vec<f64>,
    anchor: Vec<f64>,
}

/// Serialized form of a [`ProblemInstance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemBundle {
    pub dimension: usize,
    pub num_workers: usize,
    pub reg_weight: f64,
    pub row_weight: f64,
    pub seed: u64,
    pub requested: RequestedConditioning,
    pub achieved: Option<AchievedConditioning>,
    workers: Vec<WorkerRecord>,
}

impl ProblemBundle {
    pub fn from_problem(p: &ProblemInstance) -> Self {
        let workers = p
            .locals()
            .iter()
            .map(|l| WorkerRecord {
                rows: l.rows(),
                data_matrix: l.data_matrix.transpose().iter().copied().collect(),
                targets: l.targets.iter().copied().collect(),
                anchor: l.anchor.iter().copied().collect(),
            })
            .collect();
        ProblemBundle {
            dimension: p.dimension(),
            num_workers: p.num_workers(),
            reg_weight: p.locals()[0].reg_weight,
            row_weight: p.row_weight(),
            seed: p.seed,
            requested: p.requested,
            achieved: p.achieved,
            workers,
        }
    }

    pub fn into_problem(self) -> Result<ProblemInstance> {
        if self.workers.len() != self.num_workers {
            return Err(Error::Config(format!(
                "bundle lists {} workers but num_workers = {}",
                self.workers.len(),
                self.num_workers
            )));
        }
        let d = self.dimension;
        let locals = self
            .workers
            .into_iter()
            .map(|w| {
                if w.data_matrix.len() != w.rows * d {
                    return Err(Error::Dimension {
                        expected: w.rows * d,
                        actual: w.data_matrix.len(),
                    });
                }
                LocalObjective::new(
                    DMatrix::from_row_slice(w.rows, d, &w.data_matrix),
                    DVector::from_vec(w.targets),
                    self.reg_weight,
                    DVector::from_vec(w.anchor),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut p = ProblemInstance::new(locals, self.seed)?.with_row_weight(self.row_weight);
        p.requested = self.requested;
        p.achieved = self.achieved;
        Ok(p)
    }
}

pub fn save_problem(p: &ProblemInstance, path: &Path) -> Result<()> {
    write_json(path, &ProblemBundle::from_problem(p))
}

pub fn load_problem(path: &Path) -> Result<ProblemInstance> {
    read_json::<ProblemBundle>(path)?
        .into_problem()
        .map_err(|e| e.context(format!("loading {}", path.display())))
}
