use std::path::PathBuf;

use serde::{Deserialize, Serialize};

/// A mandatory run that ended with non-finite iterates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub group: String,
    pub solver: String,
    pub repeat: usize,
    pub seed: u64,
    pub iterations: usize,
    pub diverged_at_inner_step: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Solver(#[from] bilevel_gr::Error),
    #[error("{} mandatory run(s) diverged", .0.len())]
    Diverged(Vec<DivergenceRecord>),
    #[error("selftest failed")]
    SelfTest,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Diverged(_) => 2,
            CliError::SelfTest => 3,
            // Runtime failures that are neither configuration nor divergence.
            CliError::Io { .. } | CliError::Solver(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
