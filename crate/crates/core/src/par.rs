//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) these run on the rayon
//! global pool; without it they are plain iterator loops. Results keep
//! input order either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Keeps the items for which `keep` holds, in input order.
#[cfg(feature = "parallel")]
pub fn filter<T, F>(items: &[T], keep: F) -> Vec<&T>
where
    T: Sync,
    F: Fn(&T) -> bool + Sync + Send,
{
    items.par_iter().filter(|t| keep(t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn filter<T, F>(items: &[T], keep: F) -> Vec<&T>
where
    F: Fn(&T) -> bool,
{
    items.iter().filter(|t| keep(t)).collect()
}

/// Whether this build runs the helpers in parallel.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
