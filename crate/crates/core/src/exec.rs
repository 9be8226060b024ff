//! Deterministic execution helpers.
//!
//! Hot loops in this crate are data-parallel: per-image maps and big
//! reductions over pair or point sets. Reductions are always computed as
//! fixed-size chunk partials combined in chunk order, so the result is
//! bitwise identical whether the chunks run on one thread or many. The
//! `parallel` feature (on by default) backs these helpers with rayon; without
//! it everything runs sequentially through the same chunking.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential code path at runtime even when the `parallel`
/// feature is compiled in. Used by benchmarks to compare both paths in one
/// process; results are bitwise identical either way.
pub fn force_sequential(yes: bool) {
    FORCE_SEQUENTIAL.store(yes, Ordering::SeqCst);
}

/// Whether work will actually be spread across threads.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Map `f` over `0..n`, preserving index order in the output.
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Fold `items` in fixed chunks of `chunk`, then combine the per-chunk
/// partials strictly in chunk order.
pub(crate) fn chunk_fold<T, A, FI, FF, FC>(
    items: &[T],
    chunk: usize,
    init: FI,
    fold_chunk: FF,
    combine: FC,
) -> A
where
    T: Sync,
    A: Send,
    FI: Fn() -> A + Sync,
    FF: Fn(A, &[T]) -> A + Sync,
    FC: Fn(A, A) -> A,
{
    let chunk = chunk.max(1);
    let partials: Vec<A>;
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            partials = items
                .par_chunks(chunk)
                .map(|c| fold_chunk(init(), c))
                .collect();
        } else {
            partials = items.chunks(chunk).map(|c| fold_chunk(init(), c)).collect();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        partials = items.chunks(chunk).map(|c| fold_chunk(init(), c)).collect();
    }
    partials.into_iter().fold(init(), combine)
}
