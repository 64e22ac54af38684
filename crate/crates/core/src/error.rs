//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or channel counts do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value falls outside the domain of an operation (log of a
    /// non-positive number, empty reduction, non-finite input, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an API contract (non-scalar loss, bad index, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Optimization produced a non-finite loss or gradient.
    #[error("divergence at step {step}: {message}")]
    Divergence { step: usize, message: String },

    /// Scene generation hit a geometric degeneracy.
    #[error("scene generation error: {0}")]
    Scene(String),

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    /// Malformed or unknown configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn domain_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
