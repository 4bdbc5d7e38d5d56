//! Experiment runner: TOML config, sweep commands, CSV and SVG output.

pub mod commands;
pub mod config;
pub mod output;
pub mod svg;

pub use commands::{Command, Context};
pub use config::ExperimentConfig;
pub use output::Report;
