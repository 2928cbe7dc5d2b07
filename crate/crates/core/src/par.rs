//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over the rayon pool;
//! without it they fall back to plain sequential iteration. Results are
//! always returned in input order, so reductions over them are
//! deterministic regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

macro_rules! if_rayon {
    ($rayon_value: expr, $else_value: expr) => {{
        #[cfg(feature = "parallel")]
        {
            ($rayon_value)
        }
        #[cfg(not(feature = "parallel"))]
        {
            ($else_value)
        }
    }};
}

/// Map `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if_rayon!(
        items.par_iter().map(f).collect(),
        items.iter().map(f).collect()
    )
}

/// Map `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if_rayon!(
        (0..n).into_par_iter().map(f).collect(),
        (0..n).map(f).collect()
    )
}

/// Fallible ordered map; the first error in input order wins.
pub fn try_map<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

/// Whether this build fans out over a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
