//! Crate-wide error type.
//!
//! File-format problems are split into distinct variants (bad magic/version,
//! truncation, header/payload inconsistency) so callers can tell them apart.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input failed a precondition (non-finite values, bad config, ...).
    #[error("validation: {0}")]
    Validation(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Unrecognized magic bytes or unsupported format version.
    #[error("format: {0}")]
    Format(String),

    /// File ended before the payload promised by its header.
    #[error("truncated: {0}")]
    Truncated(String),

    /// Header fields disagree with each other or with the payload.
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),

    /// A numeric computation failed (NaN loss, diverging sampler, ...).
    #[error("numeric: {0}")]
    Numeric(String),

    /// Rejection sampling could not place the requested bodies.
    #[error("placement failed after {attempts} attempts")]
    Placement { attempts: usize },

    /// A mask id selected no tracks.
    #[error("no tracks carry mask id {id}")]
    EmptySelection { id: u16 },

    /// A metric has no defined value for this input.
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of numeric computations (as opposed to bad inputs).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
