use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated an operation's precondition (empty matrix,
    /// non-finite entry, out-of-range trit, bad index...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A packed 2-bit field held the reserved value 3.
    #[error("corrupt packed payload: reserved field value 3 at element {index}")]
    Corrupt { index: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("numeric divergence at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
