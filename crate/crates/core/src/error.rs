//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibError {
    /// Shapes of two related inputs disagree (design rows vs observations, etc).
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A value is outside its admissible set (negative range parameter,
    /// empty design, malformed bounds, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity showed up where a finite number was required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Cholesky factorization failed even after the jitter ladder.
    #[error("correlation matrix not positive definite (last jitter tried {jitter:.3e}): {context}")]
    SingularMatrix { jitter: f64, context: String },

    /// The optimizer could not produce a usable point.
    #[error("optimization failed: {0}")]
    OptimizerFailure(String),

    /// A bound simulator reported a failure or returned a malformed output.
    #[error("simulator error: {0}")]
    Simulator(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),

    /// Persisted artifact has an unsupported format version.
    #[error("unsupported format version {found} (this build reads version {expected})")]
    VersionMismatch { expected: u32, found: u32 },
}

pub type Result<T> = std::result::Result<T, CalibError>;

impl CalibError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        CalibError::DimensionMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CalibError::InvalidArgument(msg.into())
    }
}
