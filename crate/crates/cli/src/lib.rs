//! Batch driver for the mcxtfc experiments: configuration files, experiment
//! execution, artifact writing and result aggregation.

pub mod cli;
pub mod config;
mod error;
pub mod experiments;
pub mod plot;
pub mod report;

pub use error::{CliError, Result};
