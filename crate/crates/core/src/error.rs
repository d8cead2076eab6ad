use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum MklError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("kernel matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("kernel matrix is not symmetric (max asymmetry {max_asym:e})")]
    NotSymmetric { max_asym: f64 },

    #[error("sample ids do not match: {0}")]
    IdMismatch(String),

    #[error("group `{0}` has no features")]
    EmptyGroup(String),

    #[error("sample `{0}` has non-positive self-similarity and cannot be normalized")]
    ZeroNorm(String),

    #[error("invalid kernel weights: {0}")]
    InvalidWeights(String),

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel is not positive semidefinite (quadratic form {value:e} for kernel {kernel})")]
    NotPsd { kernel: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("solver did not converge within {iterations} iterations")]
    NonConvergence { iterations: u64 },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, MklError>;

impl MklError {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        MklError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MklError::Io {
            path: path.into(),
            source,
        }
    }
}
