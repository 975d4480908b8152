use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("forward cache does not belong to this network state: {0}")]
    Cache(String),

    #[error("training diverged in epoch {epoch} (loss is not finite)")]
    TrainingDiverged { epoch: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { expected: u32, found: String },

    #[error("corrupt checkpoint: {0}")]
    Corruption(String),

    #[error("checkpoint header inconsistent with payload: {0}")]
    Consistency(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Errors caused by bad arguments or malformed input files rather than
    /// by the program or the environment.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Cache(_) | Error::TrainingDiverged { .. } => false,
            Error::Io { source, .. } => matches!(
                source.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied
            ),
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
