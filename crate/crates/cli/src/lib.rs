//! Experiment harness for the `brightside` sampler: presets, configuration
//! files and CSV/JSON artifacts behind the `brightside` binary.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{ExperimentConfig, Overrides, Preset};
pub use error::CliError;
