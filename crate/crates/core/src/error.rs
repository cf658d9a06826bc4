use thiserror::Error;

/// Errors raised by the numeric core, the persistence formats and the analysis toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },

    #[error("attention row {row} has no attendable position")]
    FullyMaskedRow { row: usize },

    #[error("{what}: length {len} is too short, at least {min} required")]
    TooShort {
        what: &'static str,
        len: usize,
        min: usize,
    },

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed attention dump at byte {offset}: {reason}")]
    MalformedDump { offset: usize, reason: String },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        reason: reason.into(),
    }
}
