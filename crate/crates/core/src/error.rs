use thiserror::Error;

use crate::ode::SolveResult;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or shape constraint was violated.
    #[error("configuration error: {0}")]
    Config(String),
    /// A value became non-finite.
    #[error("numerical error: {0}")]
    Numeric(String),
    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),
    /// Training loss became non-finite.
    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },
    /// The adaptive solver could not make progress.
    #[error("solver failed: {reason}")]
    Stiffness { reason: String, partial: Box<SolveResult> },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
