use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SHAPE: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },

    #[error("check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Core(#[from] ls3d_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use ls3d_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Read { .. } => EXIT_IO,
            CliError::Check(_) => EXIT_NUMERIC,
            CliError::Core(e) => match e {
                E::Config(_) => EXIT_CONFIG,
                E::Shape { .. }
                | E::InvalidShape { .. }
                | E::TaskMismatch { .. }
                | E::OutOfRange { .. }
                | E::MissingState(_) => EXIT_SHAPE,
                E::NonFinite { .. } => EXIT_NUMERIC,
                E::Format(_) | E::Version { .. } | E::Io(_) => EXIT_IO,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
