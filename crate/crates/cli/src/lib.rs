//! Experiment runner for `ci-stonet-core`: TOML configuration, CSV and
//! checkpoint formats, and the pipelines behind the `ci-stonet` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod pipeline;

pub use commands::{run, Command};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
