//! Command-line front end: configuration, studies and result files.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

pub use commands::{run, Command};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] maglev_mpc::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// How a finished command should end the process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok,
    Diverged,
    SolverFailure,
}

impl Exit {
    pub fn code(self) -> i32 {
        match self {
            Exit::Ok => 0,
            Exit::Diverged => 2,
            Exit::SolverFailure => 3,
        }
    }
}

/// Exit code of errors that stop a command before it produces results.
pub const USAGE_EXIT: i32 = 1;

#[derive(Debug, Clone)]
pub struct Context {
    pub out: PathBuf,
    /// Worker threads for sweep points.
    pub jobs: usize,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Human-readable summary for the terminal.
    pub summary: String,
    pub exit: Exit,
}

/// Maps `f` over `items` on `jobs` threads, keeping the input order.
pub fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>, CliError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, CliError> + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Builds the run configuration from an optional file, `key=value`
/// overrides and a seed that replaces both random streams.
pub fn configure(file: Option<&std::path::Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut config = match file {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for pair in overrides {
        config.set_pair(pair)?;
    }
    if let Some(seed) = seed {
        config.set("sim.seed", &seed.to_string())?;
        config.set("guideway.seed", &seed.to_string())?;
    }
    Ok(config)
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
    #[doc = include_str!("../../../book/src/results.md")]
    struct Results;
}
