//! Crate-wide error type.
//!
//! Each failure mode named by a module contract maps onto one variant here,
//! so call sites can match on the kind without string parsing.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape-incompatible operands; carries both shapes for diagnosis.
    #[error("{op}: dimension mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An op produced a non-finite value.
    #[error("{op}: non-finite output")]
    Numeric { op: &'static str },

    /// Caller violated an API precondition.
    #[error("usage: {0}")]
    Usage(String),

    /// An invariant that valid inputs cannot break was broken anyway.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Scale-schedule construction failed.
    #[error("schedule: {0}")]
    Schedule(String),

    /// Codebook construction or validation failed.
    #[error("codebook: {0}")]
    Codebook(String),

    /// Token/pyramid coding failed (e.g. index out of range).
    #[error("codec: {0}")]
    Codec(String),

    /// Index argument outside its documented range.
    #[error("range: {0}")]
    Range(String),

    /// The finite-difference oracle cannot run (e.g. non-deterministic f).
    #[error("oracle: {0}")]
    Oracle(String),

    /// Sampling failed; names the scale where logits went non-finite.
    #[error("generation failed at scale {scale}: {reason}")]
    Generation { scale: usize, reason: String },

    /// Training data inconsistent with the model (e.g. target >= vocab).
    #[error("data: {0}")]
    Data(String),

    /// Benchmark could not produce a trustworthy measurement.
    #[error("bench: {0}")]
    Bench(String),

    /// Model configuration is internally inconsistent.
    #[error("config: {0}")]
    Config(String),

    /// A request outside the mathematical domain of an analysis op.
    #[error("domain: {0}")]
    Domain(String),

    /// Malformed checkpoint, token file, or config file.
    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(String),
}

impl Error {
    /// Process exit code for the CLI: usage errors exit 1, everything else 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            _ => 2,
        }
    }
}
