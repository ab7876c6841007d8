//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Vector too close to zero to normalize.
    #[error("degenerate vector: norm {norm:e} is below 1e-12")]
    DegenerateVector { norm: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{context}: vector {index} has norm {norm} (expected unit within {tolerance:e})")]
    NotUnitNorm {
        context: &'static str,
        index: usize,
        norm: f64,
        tolerance: f64,
    },

    #[error("index {index} out of range for {context} of size {size}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("data error for {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub fn invalid_config(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

/// Errors raised while decoding the binary tensor container.
///
/// Each structural defect gets its own variant so callers (and the fuzz
/// tests) can tell them apart.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic {got:?}, expected {expected:?}")]
    BadMagic { got: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {got}, expected {expected}")]
    UnsupportedVersion { got: u16, expected: u16 },

    #[error("truncated file: need {expected} bytes, have {got}")]
    Truncated { expected: u64, got: u64 },

    #[error("header declares {declared} bytes but file has {actual}")]
    SizeMismatch { declared: u64, actual: u64 },

    #[error("invalid header field `{field}` = {value}")]
    InvalidHeader { field: &'static str, value: u64 },

    #[error("stored vector {index} has norm {norm} outside unit tolerance {tolerance}")]
    NormViolation {
        index: usize,
        norm: f64,
        tolerance: f64,
    },

    #[error("mask byte at offset {offset} is {value}, expected 0 or 1")]
    InvalidMask { offset: usize, value: u8 },
}
