//! Experiment runner for edge-consistency distillation: run configuration,
//! binary checkpoints, SVG plots and the subcommands of the `edgedistill`
//! binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;

pub use error::{CliError, CliResult};
