//! Library behind the `fusion` binary: run configuration, subcommands and
//! benchmark suites.

pub mod commands;
pub mod config;
mod error;
pub mod suites;

pub use error::{CliError, CliResult};
