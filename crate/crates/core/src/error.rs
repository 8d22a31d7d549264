use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("non-finite loss term `{term}` at {phase} epoch {epoch}")]
    NonFinite {
        term: &'static str,
        phase: &'static str,
        epoch: usize,
    },

    #[error("{}:{line}: {msg}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the environment (files, arguments,
    /// unreadable input) rather than by the data or the model.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::InvalidArgument(_) | Error::Parse { .. } | Error::Json(_)
        )
    }
}

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}

pub(crate) fn arg_err(what: impl Into<String>) -> Error {
    Error::InvalidArgument(what.into())
}
