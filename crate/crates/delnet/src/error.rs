//! Crate-wide error type.
//!
//! One enum rather than per-module error types: almost every failure here is
//! terminal for the run, and the CLI only needs to distinguish "bad config"
//! (exit 2) from "aborted at runtime" (exit 3).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid run configuration (bad JSON, unknown key, out-of-range value).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shapes incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced or received NaN/Inf.
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    /// A caller-supplied argument is outside the operation's domain.
    #[error("invalid argument to {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    /// Threshold update requested before enough ambiguous observations exist.
    #[error("threshold update needs more than {min} history entries, have {have}")]
    InsufficientHistory { have: usize, min: usize },

    /// The expert library is full and no eviction policy exists.
    #[error("expert capacity exhausted: {live} live experts at capacity {capacity}")]
    CapacityExhausted { live: usize, capacity: usize },

    /// A parameter passed to the optimizer carries no gradient buffer.
    #[error("missing gradient for parameter {index}")]
    MissingGradient { index: usize },

    /// Distillation requested without a teacher snapshot.
    #[error("distillation requires a teacher snapshot and none exists")]
    MissingTeacher,

    /// A serialized artifact (.dlt tensor, checkpoint) failed to parse.
    #[error("format error in {what}: {detail}")]
    Format { what: &'static str, detail: String },

    /// Frozen parameters changed, or a checkpoint probe replay diverged.
    #[error("digest mismatch: {0}")]
    DigestMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Error {
        Error::InvalidArg { op, detail: detail.into() }
    }
}
