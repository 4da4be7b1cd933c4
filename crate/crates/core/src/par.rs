//! Execution helpers for the data-parallel inner loops.
//!
//! With the `parallel` feature (the default) these route through rayon;
//! without it they degrade to plain sequential iteration. Work is always
//! partitioned along independent output chunks and every chunk is filled by
//! the same sequential code, so both builds produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many elements the rayon spawn overhead outweighs the work.
#[cfg(feature = "parallel")]
const PAR_MIN_ELEMS: usize = 4096;

/// Which execution path this build uses.
pub fn mode() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

/// Fills `data` by running `f(chunk_index, chunk)` over equally sized
/// disjoint chunks. `data.len()` must be a multiple of `chunk`.
pub(crate) fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk > 0 && data.len().is_multiple_of(chunk));
    #[cfg(feature = "parallel")]
    {
        if data.len() >= PAR_MIN_ELEMS {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Elementwise map over a slice, preserving order.
pub(crate) fn map_unary<F>(src: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if src.len() >= PAR_MIN_ELEMS {
            return src.par_iter().map(|&x| f(x)).collect();
        }
    }
    src.iter().map(|&x| f(x)).collect()
}

/// Maps `f` over coarse-grained work items (one per input element),
/// collecting results in input order. Callers fan out over samples or
/// pyramid levels with this; results stay deterministic because order is
/// preserved.
pub fn map_items<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
