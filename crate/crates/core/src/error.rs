use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("instance too large to enumerate: {0}")]
    TooLarge(String),
    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: u64, msg: String },
    #[error("invalid spec `{text}`: {msg}")]
    Spec { text: String, msg: String },
    #[error("training diverged at step {step}; last finite losses {last_finite:?}")]
    Divergence { step: usize, last_finite: Vec<f64> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
