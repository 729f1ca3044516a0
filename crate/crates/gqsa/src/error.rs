//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch between operands (GEMV length, group size vs. cols, ...).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Argument outside its documented domain (bad bit width, sparsity out of range, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Numerical failure (non-finite input, factorization breakdown, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A layer failed structural validation.
    #[error("invalid layer: {0}")]
    Validation(String),

    /// Optimizer-level failure during recovery tuning.
    #[error("tuning error: {0}")]
    Tuning(String),

    #[error("format error: {0}")]
    Format(#[from] FormatError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Parse failures for the on-disk container. Each kind is distinct so callers
/// can tell a wrong file apart from a damaged one.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected \"GQS1\", found {found:02x?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("truncated stream: needed {needed} bytes at offset {offset}, only {available} left")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("malformed field: {0}")]
    Invalid(String),
}
