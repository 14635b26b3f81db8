use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure categories shared by every pipeline stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("vocabulary error: token id {id} out of range for vocabulary of {vocab_size}")]
    Vocabulary { id: u32, vocab_size: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("state error: {0}")]
    State(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("missing artifact from stage `{stage}`: {path}")]
    Dependency { stage: String, path: PathBuf },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this failure: 2 usage/config, 3 data/parse,
    /// 4 integrity/compatibility, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::State(_) => 2,
            Error::Shape(_)
            | Error::Input(_)
            | Error::Vocabulary { .. }
            | Error::Data(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Dependency { .. } => 3,
            Error::Compatibility(_) | Error::Integrity(_) => 4,
            Error::Numeric(_) | Error::Metric(_) => 5,
        }
    }
}
