use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("pareto exponent must exceed 3 for a finite mean range, got {0}")]
    ParetoExponent(f64),

    #[error("dataset has no points")]
    EmptyDataset,

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("unknown stock variable `{0}`")]
    UnknownVariable(String),

    #[error("line {line}, column `{column}`: {message}")]
    Ingest {
        line: u64,
        column: String,
        message: String,
    },

    #[error("grid mismatch: {0}")]
    Mismatch(String),

    #[error("computation cancelled")]
    Cancelled,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("corrupt catalog: {0}")]
    Catalog(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
