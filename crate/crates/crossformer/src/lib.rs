//! File formats, configuration and the command-line driver around
//! `crossformer-core`.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod records;
pub mod report;

pub use error::{CliError, ErrorRecord, Result};
