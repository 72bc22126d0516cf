//! Crate-wide error type.
//!
//! Numerical failures are never silently clamped: any NaN/Inf produced by an
//! op, a zero-norm vector fed to a normaliser, or a non-finite loss during
//! training surfaces as an [`Error`] naming the offending site.

use std::io;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operands do not have compatible shapes for the requested op.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// An op produced (or was handed) a NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A vector with norm below the guard threshold reached a normaliser.
    #[error("zero-norm slice in {op} (slice index {index})")]
    ZeroNorm { op: String, index: usize },

    /// `backward` was called on a node that is not a scalar.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// A configuration value is outside its documented range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A class label outside {{0, 1}} was supplied.
    #[error("invalid label {label}; expected 0 (fake) or 1 (real)")]
    InvalidLabel { label: i64 },

    /// A batch was requested from a class with no remaining samples.
    #[error("class exhausted: {0}")]
    ClassExhausted(String),

    /// A manipulation family was referenced that the dataset does not contain.
    #[error("unknown or absent manipulation family: {0}")]
    UnknownFamily(String),

    /// A numerical failure that is not tied to a single graph node.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An on-disk artifact is missing or malformed.
    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: config errors map to 2, numerical
    /// failures to 3 and missing artifacts to 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidLabel { .. } | Error::UnknownFamily(_) => 2,
            Error::NonFinite { .. }
            | Error::ZeroNorm { .. }
            | Error::NonScalarLoss { .. }
            | Error::Numerical(_)
            | Error::ShapeMismatch { .. }
            | Error::ClassExhausted(_) => 3,
            Error::Artifact(_) | Error::Io(_) | Error::Json(_) => 4,
        }
    }
}
