//! Command-line front end: flat run configuration, subcommands and exit codes.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
