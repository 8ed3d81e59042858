//! Data-parallel loop helpers with a sequential fallback.
//!
//! Every parallel loop splits work across disjoint output regions and keeps a
//! fixed reduction order inside each region, so the parallel and sequential
//! paths produce bit-identical results. The `parallel` feature selects whether
//! rayon is compiled in at all; `set_parallel` toggles it at runtime (used by
//! the benchmark suite to compare both paths in one binary).

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Runtime toggle for the rayon path. No effect without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// `(0..n).map(f)` collected in index order.
pub fn map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f(i, chunk_i)` over consecutive `chunk`-sized pieces of `buf`.
pub fn for_each_chunk_mut<T: Send>(
    buf: &mut [T],
    chunk: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
