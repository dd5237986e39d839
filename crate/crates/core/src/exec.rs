//! Data-parallel fan-out helpers.
//!
//! With the `parallel` feature (the default) the closures run on the rayon
//! thread pool; without it everything runs sequentially. Both paths collect
//! results in input order, so switching between them never changes a value.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over items sequentially, regardless of features. Kept public so the
/// benchmark suite can compare both execution modes in one binary.
pub fn map_seq<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    map_seq(items, f)
}

/// Fallible map; the first error wins (input order).
#[cfg(feature = "parallel")]
pub fn try_map<T: Sync, U: Send, E: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<U, E> + Sync + Send,
) -> Result<Vec<U>, E> {
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn try_map<T, U, E>(items: &[T], f: impl Fn(&T) -> Result<U, E>) -> Result<Vec<U>, E> {
    items.iter().map(f).collect()
}

/// Caps the global worker pool at `n` threads. Call once, before any
/// parallel work; later calls are ignored (the pool is already built).
/// Without the `parallel` feature this is a no-op.
pub fn limit_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}
