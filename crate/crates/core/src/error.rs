use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input is not well-formed JSON.
    #[error("parse error: {0}")]
    Parse(String),
    /// Well-formed JSON that does not match the expected schema.
    #[error("schema error: {0}")]
    Schema(String),
    /// Schema-valid input that breaks a data invariant.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Classify a serde_json failure. `context` names the document being read.
    pub(crate) fn from_json(context: &str, err: serde_json::Error) -> Self {
        use serde_json::error::Category;
        match err.classify() {
            Category::Syntax | Category::Eof => Error::Parse(format!("{context}: {err}")),
            Category::Data => Error::Schema(format!("{context}: {err}")),
            Category::Io => Error::Parse(format!("{context}: {err}")),
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
