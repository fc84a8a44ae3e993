//! Error type shared across the crate.
//!
//! Variants map onto the CLI exit codes: contract violations exit 1,
//! I/O problems exit 2 and training divergence exits 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition (shape mismatch,
    /// indivisible resolution, malformed input...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("malformed data: {0}")]
    Format(String),

    /// A loss term became non-finite during training.
    #[error("training diverged: non-finite value in `{term}` at step {step}")]
    Divergence { term: String, step: usize },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) => 1,
            Error::Io(_) | Error::Image(_) | Error::Format(_) => 2,
            Error::Divergence { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
