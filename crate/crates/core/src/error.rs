use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the estimation, simulation and backtest pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: csv error: {message}")]
    Csv { path: PathBuf, message: String },

    /// Cell-level ingestion failure; `row` and `col` are 1-based data coordinates
    /// (row 1 is the first line after the header).
    #[error("invalid cell at row {row}, column {col}: {message}")]
    Cell {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("insufficient data: need at least {required}, got {actual}")]
    InsufficientData { required: usize, actual: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("estimate is at stage {actual:?}, expected {expected:?}")]
    StageMismatch {
        expected: crate::covariance::Stage,
        actual: crate::covariance::Stage,
    },

    #[error("forests were trained on different datasets")]
    DatasetMismatch,

    #[error("kernel weights vanish at every sample (bandwidth {bandwidth})")]
    EmptyKernel { bandwidth: f64 },

    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
