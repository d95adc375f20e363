//! Operator-facing tools around `lobit-core`: run configuration, dataset
//! loading, and the `train`, `eval`, `sweep`, `bench` and `histogram`
//! commands behind the `lobit` binary.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, Result};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "LOBIT_THREADS";

/// Sizes the global rayon pool from `LOBIT_THREADS` when it is set.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}
