//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by the library.
///
/// The CLI maps these onto process exit codes: configuration and shape
/// problems are usage errors, invariant violations indicate a bug in a
/// fast path (or a corrupted run), and I/O and trace-format failures
/// are environment problems.
#[derive(Debug, Error)]
pub enum Error {
    /// Operands or configuration values do not fit together.
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch {
        context: &'static str,
        detail: String,
    },

    /// A configuration or argument value is invalid on its own.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Appending to a cache would exceed the model's maximum sequence length.
    #[error("sequence overflow: position {position} exceeds max_seq {max_seq}")]
    SequenceOverflow { position: usize, max_seq: usize },

    /// A numeric kernel produced a non-finite value.
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    /// A checked invariant failed; this always means a bug somewhere.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// A trace file is malformed.
    #[error("trace format error at byte {offset}: {detail}")]
    TraceFormat { offset: u64, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            detail: detail.into(),
        }
    }
}
