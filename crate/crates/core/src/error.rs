use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the attribution library.
#[derive(Debug, Error)]
pub enum RcaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed csv at line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("non-finite value at row {row}, column '{column}'")]
    NonFinite { row: usize, column: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown sensor '{0}'")]
    UnknownSensor(String),

    #[error("data leakage: {0}")]
    Leakage(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("no embedding for window {window_id} (masked sensor {masked:?})")]
    UnknownWindow {
        window_id: usize,
        masked: Option<usize>,
    },

    #[error("detector does not expose a Lipschitz constant for sensor {0}")]
    UnknownLipschitz(usize),

    #[error("external detector failure: {0}")]
    External(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unsupported format: {0}")]
    Format(String),
}

pub type Result<T, E = RcaError> = std::result::Result<T, E>;

impl RcaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RcaError::Io {
            path: path.into(),
            source,
        }
    }
}
