use std::path::PathBuf;

use thiserror::Error;

use crate::params::Checkpoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: schema violation: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("infeasible scene spec: {0}")]
    Infeasible(String),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: {detail}")]
    Diverged {
        epoch: usize,
        iteration: usize,
        detail: String,
        last_good: Box<Checkpoint>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, err: &serde_json::Error) -> Self {
        Error::Parse {
            path: path.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Diverged { .. })
    }
}
