//! File formats, TOML run configuration, and the command-line harness for
//! `depthfusion-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod format;
pub mod output;

pub use config::RunConfig;
pub use error::{AppError, Result};
