use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {dim} is {actual}, expected {expected}")]
    Shape {
        context: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {context} at {location}")]
    NonFinite { context: String, location: String },

    #[error("task mismatch: network is built for {network}, requested {requested}")]
    TaskMismatch { network: String, requested: String },

    #[error("backward called on {0} without saved forward state")]
    MissingState(&'static str),

    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },

    #[error("corrupt file: {0}")]
    Format(String),

    #[error("incompatible checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, dim: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            context,
            dim,
            expected,
            actual,
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>, location: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            location: location.into(),
        }
    }
}
