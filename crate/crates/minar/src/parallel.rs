//! Data-parallel helpers with a sequential fallback.
//!
//! All batch work in the toolbox (dataset generation, per-graph evaluation,
//! per-probe scoring) goes through [`par_map`]. With the default `parallel`
//! feature it fans out over rayon; without it the same call is a plain
//! sequential map. Results are collected in input order, so reductions over
//! the output are fixed-order and deterministic either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving input order in the output.
#[cfg(not(feature = "parallel"))]
pub fn par_map<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Indexed variant of [`par_map`] for per-item seeds derived from an index.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U + Sync + Send,
{
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Indexed variant of [`par_map`] for per-item seeds derived from an index.
#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U + Sync + Send,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Sequential map with the same signature as [`par_map`]. Always available;
/// the bench suite uses it as the baseline against the rayon path.
pub fn seq_map<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Cap the global worker pool. A no-op without the `parallel` feature or if
/// the pool was already initialized.
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}
