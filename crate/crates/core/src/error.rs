use std::io;
use std::path::PathBuf;

/// Errors raised by the simulator, its file formats, and run orchestration.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("malformed {kind} file: {message}")]
    Format { kind: &'static str, message: String },

    #[error("cannot compare runs: {0}")]
    Comparison(String),

    #[error("run directory {path} is locked by another process")]
    Locked { path: PathBuf },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(kind: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            kind,
            message: message.into(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Config { .. } => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) | Error::Locked { .. } => 4,
            Error::Format { .. } => 5,
            Error::Comparison(_) => 6,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
