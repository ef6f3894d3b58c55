//! Internal helpers that switch the data-parallel inner loops between
//! rayon and plain sequential iteration.
//!
//! Every helper produces results in index order, so the `parallel`
//! feature changes scheduling only, never values: outputs are
//! bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `0..n` to a vector, in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `0..n` to a vector, in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

