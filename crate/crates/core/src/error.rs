use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON at byte offset {offset}: {message}")]
    Json { offset: usize, message: String },

    #[error("record {id}: {message}")]
    Validation { id: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub fn validation(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { id: id.into(), message: message.into() }
    }

    pub fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format { what, message: message.into() }
    }

    /// True for errors caused by bad user input rather than a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Json { .. } | Error::Validation { .. } | Error::Config(_) | Error::Format { .. } | Error::Empty(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
