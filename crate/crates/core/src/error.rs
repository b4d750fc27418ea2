//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Shape and width problems carry the
//! offending shapes so messages are actionable; numeric errors name the operation
//! (and for the SSD scan, the step) that produced a non-finite value.

use thiserror::Error;

/// Unified error for tensor ops, model assembly, file formats, and pruning plans.
#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must agree do not.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single shape or width is structurally invalid for the operation.
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// An operation produced NaN or Inf.
    #[error("{op}: non-finite value{}", detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        detail: Option<String>,
    },

    /// A checkpoint or calibration file violates its format contract.
    #[error("format: {0}")]
    Format(String),

    /// A pruning plan fails validation against the model it targets.
    #[error("plan: {0}")]
    Plan(String),

    /// Calibration input is unusable (empty set, token out of vocab, bad stats).
    #[error("calibration: {0}")]
    Calib(String),

    /// Thread-pool construction failed.
    #[error("runtime: {0}")]
    Runtime(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for a [`Error::Dimension`] with a formatted message.
    pub fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            msg: msg.into(),
        }
    }

    /// Shorthand for a [`Error::NonFinite`] without positional detail.
    pub fn non_finite(op: &'static str) -> Self {
        Error::NonFinite { op, detail: None }
    }
}
