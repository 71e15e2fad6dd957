use std::path::PathBuf;

/// Errors produced by `flowsamp-core`.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{kind} index {index} out of range (size {size})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid routing matrix: {0}")]
    InvalidRouting(String),

    #[error("invalid flow model: {0}")]
    InvalidModel(String),

    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    /// A link estimate was requested for a link that is not sampled (u = 0).
    #[error("no estimate available: sampling rate is zero")]
    NoEstimate,

    /// BLUE weights were requested for an empty set of observations.
    #[error("no observations to combine")]
    NoObservation,

    #[error(
        "exact solver would enumerate {candidates} product vertices (cap {cap}); \
         use the heuristic or continuous solver for instances this size"
    )]
    SolverSize { candidates: f64, cap: u64 },

    #[error("numerical failure at step {step}: {reason}")]
    Numerical { step: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }
}
