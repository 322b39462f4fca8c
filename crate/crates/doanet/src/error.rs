use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed us something structurally wrong (shape, range, count).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A geometric placement could not be satisfied; callers may resample.
    #[error("placement failed: {0}")]
    Placement(String),

    /// Dataset generation exhausted its retry budget.
    #[error("dataset generation failed: {0}")]
    Generation(String),

    /// Training produced a non-finite loss.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn wav(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Wav { path: path.into(), message: message.into() }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
