//! Data-parallel map helpers. The `parallel` feature routes batch work through
//! rayon; without it everything runs sequentially. Both paths preserve input
//! order, so reductions that sum in element order are deterministic either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Always-sequential map (baseline for benchmarks).
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
    T: Sync,
    U: Send,
{
    items.iter().map(f).collect()
}

/// Rayon-parallel map. Available regardless of the feature flag so benchmarks
/// can compare both paths in one build.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
    T: Sync,
    U: Send,
{
    items.par_iter().map(f).collect()
}

/// Map used by batch code paths: parallel when the feature is enabled.
pub fn maybe_par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
    T: Sync,
    U: Send,
{
    #[cfg(feature = "parallel")]
    {
        par_map(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq_map(items, f)
    }
}

/// Parallel map over an index range.
pub fn maybe_par_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U + Sync + Send,
    U: Send,
{
    let idx: Vec<usize> = (0..n).collect();
    maybe_par_map(&idx, |&i| f(i))
}
