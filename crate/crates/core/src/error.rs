use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
///
/// The CLI maps these onto process exit codes: I/O and format problems exit
/// with 2, everything else with 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus contains no tokens")]
    EmptyCorpus,

    #[error("no training data after preprocessing")]
    EmptyTrainingData,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("unsupported checkpoint format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the CLI should report this as an I/O-class failure.
    pub fn is_io_class(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::UnsupportedFormat(_)
                | Error::CorruptCheckpoint(_)
                | Error::Parse(_)
        )
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !($cond) {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}

macro_rules! domain {
    ($cond:expr, $($arg:tt)+) => {
        if !($cond) {
            return Err($crate::error::Error::Domain(format!($($arg)+)));
        }
    };
}

pub(crate) use contract;
pub(crate) use domain;
