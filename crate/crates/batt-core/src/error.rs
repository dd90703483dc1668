//! Error type shared across the crate.
//!
//! Every failure mode gets its own variant so callers (and the C ABI) can
//! distinguish, say, a truncated tensor file from one with the wrong magic
//! bytes without parsing message strings.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("{context}: expected {expected} {unit}, got {got}")]
    DimMismatch {
        context: &'static str,
        unit: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0} must be nonzero")]
    ZeroDim(&'static str),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic bytes: expected \"BATN\", got {got:?}")]
    BadMagic { got: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),

    #[error("unsupported tensor rank {0}, only rank 2 is defined")]
    UnsupportedRank(u8),

    #[error("tensor dimensions {rows} x {cols} overflow the addressable size")]
    DimOverflow { rows: u64, cols: u64 },

    #[error("truncated payload: expected {expected} bytes, file holds {got}")]
    TruncatedPayload { expected: u64, got: u64 },

    #[error("trailing bytes after payload: {0} extra")]
    TrailingBytes(u64),

    #[error("not a permutation: {reason}")]
    BadPermutation { reason: String },

    #[error("mask row {0} selects no blocks")]
    EmptyMaskRow(usize),

    #[error("non-positive entry at index {0}, positive vectors required")]
    NonPositive(usize),

    #[error("sequence length {len} exceeds the dense oracle cap {cap}")]
    DenseCapExceeded { len: usize, cap: usize },

    #[error("full covariance was not computed for this block")]
    MissingCovariance,

    #[error("invalid {field}: {reason}")]
    Config { field: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable numeric code for each variant, used by the C ABI and useful
    /// for scripting around the CLI.
    pub fn code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 1,
            Error::DimMismatch { .. } => 2,
            Error::ZeroDim(_) => 3,
            Error::Empty(_) => 4,
            Error::Io(_) => 5,
            Error::BadMagic { .. } => 6,
            Error::UnsupportedVersion(_) => 7,
            Error::UnsupportedDtype(_) => 8,
            Error::UnsupportedRank(_) => 9,
            Error::DimOverflow { .. } => 10,
            Error::TruncatedPayload { .. } => 11,
            Error::TrailingBytes(_) => 12,
            Error::BadPermutation { .. } => 13,
            Error::EmptyMaskRow(_) => 14,
            Error::NonPositive(_) => 15,
            Error::DenseCapExceeded { .. } => 16,
            Error::MissingCovariance => 17,
            Error::Config { .. } => 18,
        }
    }
}
