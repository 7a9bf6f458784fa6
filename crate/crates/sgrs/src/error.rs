//! Error taxonomy shared by every module, plus the CLI exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation produced a non-finite value from finite inputs.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A caller violated an API precondition (misaligned gradients,
    /// non-scalar loss, non-distribution probabilities, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Surface distances are undefined when a mask has no foreground.
    #[error("empty mask: {0}")]
    EmptyMask(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 0 success, 2 config, 3 i/o, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Io(_) => 3,
            Error::Numeric(_) | Error::Contract(_) | Error::EmptyMask(_) => 4,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn contract_err(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
