use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GcaError>;

#[derive(Debug, Error)]
pub enum GcaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}, column {col}: {message}")]
    Parse {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("non-finite value {value} at row {row}, column {col}")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("bad magic bytes: expected \"GCAM\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-positive entry {value} at ({row}, {col})")]
    NonPositive { row: usize, col: usize, value: f64 },

    #[error("zero sum along {axis} {index}")]
    ZeroSum { axis: &'static str, index: usize },

    #[error("numerical overflow at iteration {iteration}")]
    Overflow { iteration: usize },

    #[error("target plan has mass at ({row}, {col}) where the plan is zero")]
    SupportViolation { row: usize, col: usize },

    #[error("unknown metric name {0:?}")]
    UnknownMetric(String),

    #[error("class {0} has no points")]
    EmptyClass(i64),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("stale activation cache: {0}")]
    StaleCache(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GcaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GcaError::Io {
            path: path.into(),
            source,
        }
    }
}
