//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, algebra, and I/O.
#[derive(Debug, Error)]
pub enum DirectError {
    /// Two operands (or a model and its data) disagree on shape.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// An input value is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The operand has a structure the operation does not support
    /// (e.g. elementwise log of a multi-term Kronecker sum).
    #[error("unsupported structure: {0}")]
    Unsupported(String),

    /// A dense materialization or enumeration would exceed the configured cap.
    #[error("size limit exceeded: {requested} > cap {cap}")]
    SizeExceeded { requested: u128, cap: u128 },

    /// Invalid run configuration (bad keys, unresolvable paths, bad enums).
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset or file-format problem.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure (non-finite objective, overflow that survived retries).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DirectError>;

impl DirectError {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        DirectError::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
