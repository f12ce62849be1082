//! Execution-lane helpers.
//!
//! Data-parallel inner loops (multi-RHS Dirichlet solves, per-element gradient
//! contractions, per-sample dataset generation) go through [`map_indexed`],
//! which runs on rayon when the `parallel` feature is enabled and falls back
//! to a plain sequential loop otherwise. Results are always collected in index
//! order, so switching lanes never changes output bytes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n` and collect results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n` and collect results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Always-sequential twin of [`map_indexed`]; the bench suite compares the
/// two lanes against each other.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
