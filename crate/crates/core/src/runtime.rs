//! Thread-pool control for the parallel kernels.
//!
//! Every parallel region in this crate folds per-item results in a fixed
//! order, so the numeric output is identical for any thread count. The
//! helpers here only bound how many worker threads rayon may use.

use crate::error::{Error, Result};

/// Runs `f` on a dedicated rayon pool with `threads` workers.
///
/// `threads == 0` keeps rayon's default sizing (one worker per logical
/// CPU). The pool is torn down when `f` returns.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Runtime(e.to_string()))?;
    Ok(pool.install(f))
}
