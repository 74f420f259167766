//! Command-line front end: experiment configs, the run matrix, plot data.

pub mod app;
pub mod config;
pub mod error;
pub mod experiment;
pub mod plotdata;
pub mod summary;

pub use app::cli_main;
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use experiment::{run_experiment, RunOptions};
pub use summary::Summary;
