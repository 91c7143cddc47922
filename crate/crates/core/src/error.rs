use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration or API misuse (shape mismatch, empty question, ...).
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A record parsed but broke a corpus or file invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },

    #[error("replay miss for key {key}{}", qa_id.as_ref().map(|q| format!(" (qa_id {q})")).unwrap_or_default())]
    ReplayMiss { key: String, qa_id: Option<String> },

    /// Training diverged.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io { .. } | Error::Parse { .. } | Error::Validation(_) | Error::NonFinite { .. } => 2,
            Error::Transport { .. } => 3,
            Error::ReplayMiss { .. } => 4,
        }
    }
}
