//! Order-preserving map over independent jobs (episodes, perturbation
//! probes). The parallel lane uses rayon; the sequential lane is identical
//! semantics without threads. Both produce results in input order, so every
//! downstream aggregation is byte-stable regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map in input order on the current thread.
pub fn map_sequential<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map in input order across the rayon pool.
#[cfg(feature = "parallel")]
pub fn map_parallel<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Default lane: parallel when the feature is enabled.
#[cfg(feature = "parallel")]
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_parallel(items, f)
}

/// Default lane: sequential build.
#[cfg(not(feature = "parallel"))]
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    map_sequential(items, f)
}
