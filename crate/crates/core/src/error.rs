//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. Variants are
//! grouped by subsystem so callers (in particular the CLI) can map them to
//! coarse failure categories: configuration problems, I/O problems, and
//! numerical failures.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A matrix expected to be symmetric positive definite failed to factor
    /// even after the diagonal-jitter escalation ladder.
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index}, jitter {jitter:.1e})")]
    NotPositiveDefinite {
        pivot: f64,
        index: usize,
        jitter: f64,
    },

    /// A triangular solve hit an exactly-zero diagonal element.
    #[error("triangular matrix is singular (zero diagonal at index {index})")]
    SingularTriangular { index: usize },

    /// Two containers that must agree in shape do not.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A sparse feature referenced an embedding row that does not exist.
    #[error("feature index {index} out of vocabulary for field {field} (vocab size {vocab})")]
    IndexOutOfVocabulary { field: u32, index: u32, vocab: usize },

    /// A backward pass was invoked with state that does not match the tape
    /// produced by the corresponding forward pass.
    #[error("tape mismatch: {0}")]
    TapeMismatch(String),

    /// Vectors that must live in the same space have different lengths.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A precomputed inference cache was used after the variational state or
    /// kernel changed.
    #[error("stale inference cache: built at state version {built}, model is at {current}")]
    StaleCache { built: u64, current: u64 },

    /// Ranking was asked to choose from zero candidates.
    #[error("candidate set is empty")]
    EmptyCandidateSet,

    /// An ad id does not exist in the environment's catalog.
    #[error("unknown ad id {0}")]
    UnknownAd(u32),

    /// A log line could not be parsed or failed validation.
    #[error("malformed log entry at line {line}: {reason}")]
    MalformedLogEntry { line: usize, reason: String },

    /// Training was asked to run on an empty dataset.
    #[error("dataset is empty")]
    EmptyDataset,

    /// A configuration value violates an invariant.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that indicate a numerical breakdown rather than bad
    /// input or I/O. The CLI maps these to a dedicated exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::SingularTriangular { .. }
                | Error::StaleCache { .. }
        )
    }
}
