//! Files, formats and the command line around `incongruity-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod trace;

pub use error::{CliError, CliResult};
