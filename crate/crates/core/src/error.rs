use std::path::PathBuf;

use thiserror::Error;

/// Every failure the harness can report.
#[derive(Debug, Error)]
pub enum StiltError {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch norm in train mode needs at least 2 rows, got {0}")]
    BatchSize(usize),

    #[error("non-finite value during {0}")]
    NonFinite(String),

    #[error("stale trace: produced at parameter version {trace}, model is at {model}")]
    StaleTrace { trace: u64, model: u64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}:{line}: record {id:?}: {reason}")]
    Record {
        path: PathBuf,
        line: usize,
        id: String,
        reason: String,
    },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error(
        "training diverged at epoch {epoch}, batch {batch} (lr {lr:e}): loss is not finite"
    )]
    Diverged { epoch: usize, batch: usize, lr: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),

    #[error("no runs found in {0}")]
    NoRuns(PathBuf),

    #[error("incomplete run directory {dir}: missing {}", missing.join(", "))]
    Incomplete { dir: PathBuf, missing: Vec<String> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StiltError {
    pub(crate) fn dim(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        StiltError::Dimension {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StiltError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            StiltError::Dimension { .. } => "dimension",
            StiltError::Config(_) => "config",
            StiltError::BatchSize(_) => "batch_size",
            StiltError::NonFinite(_) => "non_finite",
            StiltError::StaleTrace { .. } => "stale_trace",
            StiltError::Contract(_) => "contract",
            StiltError::Record { .. } => "record",
            StiltError::Parse { .. } => "parse",
            StiltError::Diverged { .. } => "diverged",
            StiltError::Degenerate(_) => "degenerate",
            StiltError::Length(..) => "length",
            StiltError::NoRuns(_) => "no_runs",
            StiltError::Incomplete { .. } => "incomplete",
            StiltError::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = StiltError> = std::result::Result<T, E>;
