use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped so that a command-line front end can map them onto
/// exit codes with [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty cohort after filtering")]
    EmptyCohort,

    #[error("silent recording")]
    SilentRecording,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical abort at step {step}: {msg}")]
    Numerical { step: usize, msg: String },

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("wav error in {}: {msg}", path.display())]
    Wav { path: PathBuf, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 validation, 2 I/O, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Wav { .. } | Error::Format { .. } => 2,
            Error::Numerical { .. } => 3,
            _ => 1,
        }
    }
}
