//! Data-parallel helpers with a sequential fallback.
//!
//! Compiled with the `parallel` feature (default) these fan work out over
//! rayon; without it they run plain loops. A process-wide switch
//! ([`set_parallel`]) lets benchmarks compare both paths in one binary.
//!
//! Bit-determinism contract: helpers either hand each worker an independent
//! output row, or reduce fixed-size chunks whose partial results are combined
//! in slice order. No floating-point reduction order ever depends on thread
//! count or scheduling, so parallel and sequential runs produce identical
//! bits.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable the rayon paths at runtime. No-op when the crate is
/// built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

/// Whether parallel execution is currently active.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Apply `f` to each `width`-sized row of `data`, in parallel when enabled.
/// `f` receives the row index and the row slice.
pub fn for_each_row<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(width > 0 && data.len() % width == 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        data.par_chunks_exact_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    for (i, row) in data.chunks_exact_mut(width).enumerate() {
        f(i, row);
    }
}

/// Sequential twin of [`for_each_row`], kept callable regardless of features
/// so benchmarks can pit the two against each other.
pub fn for_each_row_seq<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    assert!(width > 0 && data.len() % width == 0);
    for (i, row) in data.chunks_exact_mut(width).enumerate() {
        f(i, row);
    }
}

/// Map each element of `items` and collect in order.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return items.par_iter().map(&f).collect();
    }
    items.iter().map(&f).collect()
}

/// Sum `f` over fixed-size chunks of `0..n`, combining partials in chunk
/// order. Both paths use the same chunked reduction tree, so the result is
/// bit-identical whether or not rayon is active.
pub fn indexed_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    const CHUNK: usize = 1024;
    let chunk_sum = |s: usize| {
        let end = (s + CHUNK).min(n);
        let mut acc = 0.0;
        for i in s..end {
            acc += f(i);
        }
        acc
    };
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > CHUNK {
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        let partials: Vec<f64> = starts.par_iter().map(|&s| chunk_sum(s)).collect();
        return partials.into_iter().sum();
    }
    let mut total = 0.0;
    let mut s = 0;
    while s < n {
        total += chunk_sum(s);
        s += CHUNK;
    }
    total
}
