//! Command-line front end for the drifting field policy library: dataset
//! generation, training, evaluation, ablation sweeps and diagnostics.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use config::RunConfig;
pub use error::CliError;
