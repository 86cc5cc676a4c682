//! Data-parallel helpers. With the `parallel` feature the work is spread over
//! the ambient rayon pool; without it every helper degrades to a plain loop.
//!
//! Every helper preserves output order and never reorders a floating-point
//! reduction, so results are bit-identical with and without the feature and
//! for any pool size.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar multiply-adds a parallel split costs more than it saves.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Whether this build can run anything concurrently.
pub const fn enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Threads available to the helpers in the current context.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Calls `f(row_index, row)` for each `row_len`-wide chunk of `data`.
/// `work` is an estimate of the total cost used to decide whether to fork.
pub fn for_each_row<F>(data: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= MIN_PARALLEL_WORK && current_threads() > 1 {
        data.par_chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
        return;
    }
    let _ = work;
    data.chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if n > 1 && current_threads() > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if items.len() > 1 && current_threads() > 1 {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Runs `f` on a dedicated pool of `threads` workers (sequentially when the
/// feature is off or `threads <= 1` and no pool can be built).
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
