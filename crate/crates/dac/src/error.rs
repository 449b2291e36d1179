//! Error type shared across the library.
//!
//! The variants are grouped by how a caller is expected to react:
//! [`DacError::InvalidInput`] means the request itself is wrong (bad
//! proportion, degenerate curve, malformed config), [`DacError::Integrity`]
//! and [`DacError::Stale`] mean an on-disk artifact cannot be trusted, and
//! [`DacError::Diverged`] means an optimization produced non-finite values
//! and the run must not be used.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DacError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An artifact's content does not match its recorded fingerprint.
    #[error("integrity check failed for {what}: expected {expected}, found {actual}")]
    Integrity {
        what: String,
        expected: String,
        actual: String,
    },

    /// An artifact was produced against a different upstream artifact than
    /// the one currently supplied (e.g. a mask cache built from an older
    /// checkpoint). `expected` is the fingerprint recorded when the artifact
    /// was built; `actual` is the fingerprint of the input supplied now.
    #[error("stale artifact: {what} was built against {expected}, but the current input is {actual}")]
    Stale {
        what: String,
        expected: String,
        actual: String,
    },

    /// Loss or weights became non-finite. `epoch` is 1-based.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl DacError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DacError::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, DacError>;
