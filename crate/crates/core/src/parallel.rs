//! Deterministic chunked execution, optionally spread over a rayon pool.
//!
//! All batch reductions in this crate go through [`chunked_map`]: the input
//! is split into fixed-size chunks, each chunk is mapped independently
//! (in parallel when enabled), and the per-chunk results are returned in
//! chunk order so callers can fold them sequentially. Because the chunk
//! boundaries depend only on the chunk size — never on the thread count —
//! results are bit-identical whether the work ran on one thread or many.
//!
//! Parallelism is off by default; the CLI enables it when the
//! `DAS2_THREADS` environment variable is set above 1.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enable or disable parallel chunk execution for this process.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

/// Whether parallel chunk execution is currently enabled (and compiled in).
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Read `DAS2_THREADS` (default 1) and configure the process accordingly.
/// Returns the effective thread cap.
pub fn configure_from_env() -> usize {
    let threads = std::env::var("DAS2_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1);
    #[cfg(feature = "parallel")]
    if threads > 1 {
        // Ignore the error if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    set_parallel(threads > 1);
    threads
}

/// Default chunk size for per-point batch work.
pub const POINT_CHUNK: usize = 128;

/// Map fixed-size chunks of `items` and return the results in chunk order.
///
/// `f` receives the chunk index and the chunk slice. The decomposition is a
/// pure function of `items.len()` and `chunk_size`, so folding the returned
/// vector front to back yields the same floating-point result regardless of
/// how many threads executed the chunks.
pub fn chunked_map<T, R, F>(items: &[T], chunk_size: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync,
{
    assert!(chunk_size > 0, "chunk_size must be positive");
    if items.is_empty() {
        return Vec::new();
    }
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return items
            .par_chunks(chunk_size)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
    }
    items
        .chunks(chunk_size)
        .enumerate()
        .map(|(i, c)| f(i, c))
        .collect()
}

/// Sequential variant of [`chunked_map`], kept available in all builds so
/// benchmarks can compare the two paths directly.
pub fn chunked_map_seq<T, R, F>(items: &[T], chunk_size: usize, f: F) -> Vec<R>
where
    F: Fn(usize, &[T]) -> R,
{
    assert!(chunk_size > 0, "chunk_size must be positive");
    items
        .chunks(chunk_size)
        .enumerate()
        .map(|(i, c)| f(i, c))
        .collect()
}

/// Fold per-chunk gradient contributions into `acc`, front to back.
pub fn fold_grads(acc: &mut [f64], chunks: Vec<Vec<f64>>) {
    for chunk in chunks {
        debug_assert_eq!(chunk.len(), acc.len());
        for (a, g) in acc.iter_mut().zip(chunk.iter()) {
            *a += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_results_are_order_stable() {
        let items: Vec<f64> = (0..1000).map(|i| i as f64 * 0.1).collect();
        let seq = chunked_map_seq(&items, 64, |_, c| c.iter().sum::<f64>());
        set_parallel(true);
        let par = chunked_map(&items, 64, |_, c| c.iter().sum::<f64>());
        set_parallel(false);
        assert_eq!(seq.len(), par.len());
        for (a, b) in seq.iter().zip(par.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn empty_input_yields_no_chunks() {
        let out = chunked_map::<f64, f64, _>(&[], 16, |_, c| c.iter().sum());
        assert!(out.is_empty());
    }
}
