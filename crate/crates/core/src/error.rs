use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("score field is empty: trace has {trace_len} tokens but window is {window}")]
    EmptyField { trace_len: usize, window: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("bitmask overflow: K = {k} needs {bits} bits, at most 62 are supported")]
    Overflow { k: usize, bits: usize },

    #[error("log is unrestorable: {0}")]
    Unrestorable(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
