use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the tracking stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("vertex index {index} out of range for mesh with {len} vertices")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("degenerate triangle {0}: repeated vertex index")]
    DegenerateTriangle(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("missing normals on {0}")]
    MissingNormals(&'static str),

    #[error("normal matrix is not positive definite; deficient blocks {blocks:?}")]
    Singular { blocks: Vec<usize> },

    #[error("trajectory filter has no history")]
    NoHistory,

    #[error("insufficient data: {0}")]
    Insufficient(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical core rather than of inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. } | Error::Degenerate(_) | Error::Insufficient(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
