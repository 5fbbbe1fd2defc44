//! Files, datasets and commands around [`pfr_core`]: PPM/PGM images,
//! manifests, checkpoints, INI configuration, the training loop,
//! evaluation and reports.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod pnm;
pub mod report;
pub mod run;
pub mod runlog;

pub use pfr_core;

/// Worker cap from `PFR_THREADS` (default 1).
pub fn threads_from_env() -> Result<usize, String> {
    match std::env::var("PFR_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!("PFR_THREADS must be a positive integer, got {v:?}")),
        },
    }
}
