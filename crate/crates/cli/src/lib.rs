//! Training, generation, verification, cost analysis and benchmarking on
//! top of `fit_core`.

pub mod app;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod optim;
pub mod tasks;
pub mod train;

pub use error::{CheckpointError, CliError, Result};
