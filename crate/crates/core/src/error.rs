use thiserror::Error;

/// Errors raised by the certificate-learning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// A small-matrix solve hit the condition-number guard. Carries the
    /// condition estimate so callers can report how close to singular it was.
    #[error("singular matrix in {context} (condition estimate {cond:.3e})")]
    Singular { context: &'static str, cond: f64 },

    #[error("trajectory diverged at step {step}")]
    Divergence { step: usize },

    #[error("LQR baseline unavailable: {0}")]
    BaselineUnavailable(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
