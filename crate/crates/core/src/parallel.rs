//! Worker-count control. Results never depend on the count: callers index
//! work items and collect in index order.

use rayon::prelude::*;

/// Runs `op` inside a rayon pool of `workers` threads; `0` uses the global pool.
pub fn with_workers<R: Send>(workers: usize, op: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        return op();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("failed to build worker pool")
        .install(op)
}

/// Maps `f` over `0..n` in parallel, returning results ordered by index.
pub fn indexed_map<T: Send>(workers: usize, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    with_workers(workers, || (0..n).into_par_iter().map(&f).collect())
}
