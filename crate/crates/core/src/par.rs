//! Order-preserving parallel map used for per-sample work.
//!
//! Results are collected in index order and every reduction downstream runs
//! sequentially over that order, so sums do not depend on the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Runs `f` on a dedicated pool of `workers` threads (`0` means the global pool).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}
