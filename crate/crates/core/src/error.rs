//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An operand's shape does not conform to the operation's contract.
    #[error("{op}: shape mismatch on {operand}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        operand: &'static str,
        expected: String,
        actual: String,
    },

    /// A non-finite value (NaN/Inf) was produced or supplied. The step that
    /// produced it is aborted rather than letting the value propagate.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// An API contract was violated (scalar-ness, detachment, call ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is outside the declared space or plan.
    #[error("validation error: {0}")]
    Validation(String),

    /// Eval-mode use of a subnet whose batch-norm statistics have not been
    /// stored or calibrated.
    #[error("batch-norm statistics missing for config {digest}; run bn_calibrate first")]
    CalibrationRequired { digest: String },

    /// A file did not conform to its binary format.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        operand: &'static str,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            operand,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
