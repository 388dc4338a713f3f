use alloc::string::String;

/// Errors raised by the gating core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration value is outside its allowed range.
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("invalid temperature: {0}")]
    InvalidTemperature(f64),
    #[error("token {token} out of range for vocabulary of size {vocab}")]
    InvalidToken { token: u32, vocab: usize },
    /// A table generator was queried at a prefix it has no row for.
    #[error("unscripted prefix: {0:?}")]
    UnscriptedPrefix(alloc::vec::Vec<u32>),
    #[error("pool exhausted: every candidate at this position was rejected")]
    PoolExhausted,
    /// The action is not in the allowed set at this decision.
    #[error("masked action: {0}")]
    MaskedAction(&'static str),
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    /// Training produced a non-finite loss.
    #[error("divergence: {0}")]
    Divergence(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Invalid {
        field,
        reason: reason.into(),
    }
}
