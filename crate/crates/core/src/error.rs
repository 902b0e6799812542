//! Crate-wide error type.
//!
//! Every fallible operation in the engine returns [`Result`]. Shape errors
//! name the offending shapes so that a failed composition can be diagnosed
//! from the message alone; numeric guards report which primitive produced a
//! non-finite value.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape where exact agreement is required.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single operand has a shape the operation cannot accept.
    #[error("{op}: invalid shape {shape:?} ({msg})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    /// An index (token id, node id, gather index, axis, ...) is out of range.
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },

    /// A primitive produced NaN or Inf. The engine rejects non-finite values
    /// the moment they appear instead of letting them propagate.
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    /// A precondition on inputs (not shapes) was violated.
    #[error("{0}")]
    Invalid(String),

    /// A requested quantity has no defined value (e.g. an accuracy over an
    /// empty denominator).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Convenience constructor for free-form precondition failures.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
