//! Error type shared by every module of the crate.

use std::io;

use thiserror::Error;

/// Errors produced by the imputation library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two matrices that must agree in shape did not.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// A diffusion step index outside `1..=K`, or a step where the
    /// reverse variance vanishes and a division by it was requested.
    #[error("invalid diffusion step {step}: {reason}")]
    InvalidStep { step: usize, reason: String },

    /// A linear-algebra routine failed (e.g. a non-SPD matrix).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A sampling trajectory produced non-finite values.
    #[error("trajectory {trajectory} diverged at step {step}")]
    Diverged { trajectory: usize, step: usize },

    /// A denoiser call failed inside a sampling trajectory.
    #[error("backend failed in trajectory {trajectory} at step {step}: {source}")]
    Backend {
        trajectory: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Training {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    /// A component was used before it was ready.
    #[error("invalid state: {0}")]
    State(String),

    /// Malformed file content.
    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// The error itself, or the backend failure it wraps.
    pub fn root(&self) -> &Error {
        match self {
            Error::Backend { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn shape_mismatch(expected: (usize, usize), actual: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        expected: format!("{}x{}", expected.0, expected.1),
        actual: format!("{}x{}", actual.0, actual.1),
    }
}
