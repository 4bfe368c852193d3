//! Experiment orchestration for steerlab: configuration, persistence layout,
//! training and steering commands, sweeps, the healing experiment, and
//! report emission.

pub mod config;
pub mod error;
pub mod report;
pub mod runs;
pub mod svg;
pub mod train;

use std::path::Path;

use serde::Serialize;
use steerlab_core::io::atomic_write;
use steerlab_core::Exec;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};

pub const THREADS_ENV: &str = "STEERLAB_THREADS";

/// Execution mode for data-parallel work. Without the `parallel` feature
/// this still returns `Parallel`, which then runs sequentially.
pub fn exec() -> Exec {
    Exec::Parallel
}

/// Size the global rayon pool from `STEERLAB_THREADS`, if set. Returns the
/// pool size in effect.
pub fn init_pool() -> Result<usize> {
    let requested = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| LabError::Config(format!("{THREADS_ENV}={v} is not a positive integer")))?,
        ),
        Err(_) => None,
    };
    pool_size(requested)
}

#[cfg(feature = "parallel")]
fn pool_size(requested: Option<usize>) -> Result<usize> {
    if let Some(n) = requested {
        // A second initialization (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

#[cfg(not(feature = "parallel"))]
fn pool_size(_requested: Option<usize>) -> Result<usize> {
    Ok(1)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes()).map_err(LabError::io)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes).map_err(LabError::io)
}

/// Mean and sample standard deviation of the finite entries.
pub fn mean_std(values: &[f64]) -> (f64, f64, usize) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n = finite.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let mean = finite.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std, n)
}
