//! Execution mode for batch-level loops.
//!
//! Work is always split into the same fixed chunks; only whether chunks run
//! on the rayon pool changes. Reductions over chunk results happen in chunk
//! order on the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Enable or disable rayon dispatch. A no-op request for `true` when the
/// crate was built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Run `f` with the given mode, restoring the previous one afterwards.
pub fn with_mode<R>(parallel: bool, f: impl FnOnce() -> R) -> R {
    let prev = is_parallel();
    set_parallel(parallel);
    let out = f();
    set_parallel(prev);
    out
}

/// `(0..n).map(f)` collected in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk_len` slices of `data`
/// and collect the results in chunk order.
pub fn map_chunks_mut<T, R, F>(data: &mut [T], chunk_len: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut [T]) -> R + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() > chunk_len {
        return data.par_chunks_mut(chunk_len).enumerate().map(|(i, c)| f(i, c)).collect();
    }
    data.chunks_mut(chunk_len).enumerate().map(|(i, c)| f(i, c)).collect()
}

/// Like [`map_chunks_mut`] but discards results.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    map_chunks_mut(data, chunk_len, f);
}
