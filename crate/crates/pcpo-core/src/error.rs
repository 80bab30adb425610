//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A schedule or grid parameter is outside its admissible range.
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    /// The constant-weight solver found no admissible root at a step.
    #[error("no admissible sigma at step {step} for w*={w_star}: {reason}")]
    NoAdmissibleSigma {
        step: usize,
        w_star: f64,
        reason: String,
    },

    /// Mismatched vector dimensions.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Empty or otherwise degenerate input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A computation produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Checkpoint or config (de)serialization failure.
    #[error("serialization: {0}")]
    Serialization(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
