use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid port grid: {0}")]
    InvalidGrid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("correlation matrix is not PSD: worst eigenvalue {worst:e}")]
    NotPsd { worst: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical abort at step {step} (batch seed {batch_seed}): {message}")]
    Numerical {
        step: u64,
        batch_seed: u64,
        message: String,
    },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) | Error::InvalidGrid(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Shape(_) => 3,
            Error::Numerical { .. }
            | Error::NotPsd { .. }
            | Error::Domain(_)
            | Error::UndefinedLoss(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
