use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("record {index} ({id}): {msg}")]
    InvalidRecord {
        index: usize,
        id: String,
        msg: String,
    },

    #[error("non-finite value in {what} at row {row}, column {col}")]
    NonFinite {
        what: String,
        row: usize,
        col: usize,
    },

    #[error("duplicate {what} {name:?} at index {index}")]
    Duplicate {
        what: &'static str,
        name: String,
        index: usize,
    },

    #[error("unknown generator tag {0:?}")]
    UnknownGenerator(String),

    #[error("embedding {name:?} has norm {norm}, expected unit norm within {tol}")]
    NormViolation { name: String, norm: f64, tol: f64 },

    #[error("degenerate {what}: norm {norm:e} below {floor:e}")]
    Degenerate {
        what: String,
        norm: f64,
        floor: f64,
    },

    #[error("input contains a single class ({0} samples); both classes are required")]
    SingleClass(usize),

    #[error("empty {0}")]
    Empty(String),

    #[error("invalid parameter {name}: {msg}")]
    InvalidParameter { name: &'static str, msg: String },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("model mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("dataset {dataset:?} has no projection matrix (manifest field `projection_file`)")]
    MissingProjection { dataset: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn dims(
        what: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
