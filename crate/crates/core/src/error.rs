use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("volume is not a repetition: depth slice {slice} differs from slice 0 at in-plane index {index}")]
    NotARepetition { slice: usize, index: usize },

    #[error("invalid phantom: {0}")]
    InvalidPhantom(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("numeric input error: {0}")]
    NumericInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{}: {source}", path.display())]
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

    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
