//! Library side of the `ctxpose` command-line tool: experiment
//! configuration, exit-code mapping and the subcommand bodies.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod failure;

pub use config::{ExperimentConfig, Method, TrainConfig};
pub use failure::{exit_code, CliResult, Failure};
