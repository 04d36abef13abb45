//! Execution helpers shared by every kernel.
//!
//! With the `parallel` feature the helpers fan out over rayon's pool; without
//! it, or after [`set_parallel(false)`](set_parallel), they run on the calling
//! thread. Work is always split into the same disjoint chunks and each chunk
//! is reduced in a fixed order, so results are bit-identical in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Enables or disables the rayon path at runtime. No-op without the
/// `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    assert!(chunk_len > 0, "chunk length must be positive");
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Evaluates `f(i)` for `i in 0..n` and collects the results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
