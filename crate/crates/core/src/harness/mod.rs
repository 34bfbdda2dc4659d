//! Evaluation tasks, run configuration and the command implementations
//! behind the CLI.

pub mod commands;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod tasks;

pub use commands::{cmd_check, cmd_decode, cmd_rl, cmd_sweep, cmd_train, run, trace_path, CheckRow, Outcome, SweepRow};
pub use config::{Command, ModelShape, RlSettings, RunConfig, SweepGrid};
pub use eval::{evaluate, Decoded};
pub use metrics::Metrics;
pub use tasks::{digit_examples, TaskKind, TaskSpec};

/// Environment variable that caps prompt-level parallelism.
pub const THREADS_ENV: &str = "DLM_THREADS";

/// Sizes the global rayon pool from `DLM_THREADS` (default 1). Returns the
/// thread count in use.
pub fn init_threads() -> crate::Result<usize> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| crate::Error::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a positive integer")))?,
        Err(_) => 1,
    };
    // a pool built earlier in the process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(rayon::current_num_threads())
}
