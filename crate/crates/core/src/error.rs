use std::path::PathBuf;

use thiserror::Error;

use crate::harness::RunMetrics;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("problem of size {size} exceeds the exact-solver limit of {limit}")]
    TooLargeForExact { size: usize, limit: usize },

    #[error("kernel underflow: {0}; raise lambda or rescale the cost")]
    NumericalUnderflow(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// Training produced a non-finite loss. `completed` holds every record
    /// up to (not including) the failing step.
    #[error("distillation diverged at step {step}")]
    Diverged {
        step: usize,
        completed: Box<RunMetrics>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}{}: {message}", path.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
