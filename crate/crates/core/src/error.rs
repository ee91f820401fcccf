use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An input failed a structural or numeric precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Expanding a measure into an explicit table would exceed the configured cap.
    #[error("table with {entries} entries exceeds the cap of {cap} entries{hint}")]
    TableTooLarge {
        entries: u128,
        cap: usize,
        hint: &'static str,
    },

    /// A quantity is undefined at the requested point (e.g. conditioning on a null event).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// The operation is not defined for this representation or query kind.
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("insufficient trials: need at least {needed}, got {got}")]
    InsufficientTrials { needed: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
