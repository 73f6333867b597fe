use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: malformed configuration, out-of-range parameter, etc.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("worker index {index} out of range for {workers} workers")]
    WorkerIndex { index: usize, workers: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("calibration of {parameter} failed: target {target}, best achieved {best}")]
    Calibration {
        parameter: &'static str,
        target: f64,
        best: f64,
    },

    #[error("missing parameter `{parameter}` required by {kind}")]
    MissingParameter { parameter: &'static str, kind: String },

    #[error("degenerate parameters: {0}")]
    Degenerate(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty trace")]
    EmptyTrace,

    #[error("every stepsize diverged for {algorithm}")]
    AllDiverged { algorithm: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed csv: {0}")]
    Csv(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by user input rather than by a failed run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::WorkerIndex { .. }
            | Error::Dimension { .. }
            | Error::MissingParameter { .. }
            | Error::Degenerate(_)
            | Error::Precondition(_)
            | Error::Json(_) => true,
            Error::Context { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
