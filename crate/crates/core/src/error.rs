use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a documented precondition or schema.
    #[error("{0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    /// A model response could not be turned into a ranked prediction.
    #[error("unparseable response: {0}")]
    Parse(String),

    #[error("environment variable {var} is not set; it must hold the API key")]
    MissingApiKey { var: String },

    #[error("authentication rejected by endpoint (HTTP {status}): {body}")]
    Auth { status: u16, body: String },

    #[error("transport error: {0}")]
    Transport(String),

    /// A held-out record reached a structure used for fitting.
    #[error("train/test leakage: {0}")]
    Leakage(String),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    /// True for errors caused by bad input rather than by the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Json { .. } | Error::Csv { .. } | Error::Parse(_)
        )
    }
}
