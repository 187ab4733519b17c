//! Sample-level fan-out.
//!
//! Batch evaluation and per-sample gradients are independent across samples.
//! With the `parallel` feature they run on the rayon pool; without it (or with
//! [`Execution::Sequential`]) they run in a plain loop. Results always come
//! back in input order so downstream reductions are deterministic.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    /// Rayon when the `parallel` feature is compiled in, otherwise sequential.
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// `(0..n).map(f)` collected in index order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_range`]; the first error in index order wins.
pub fn try_map_range<R, F>(exec: Execution, n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    map_range(exec, n, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let a = map_range(Execution::Parallel, 1000, |i| i * i);
        let b = map_range(Execution::Sequential, 1000, |i| i * i);
        assert_eq!(a, b);
        assert_eq!(a[999], 999 * 999);
    }

    #[test]
    fn first_error_in_index_order_is_reported() {
        let r: Result<Vec<usize>> = try_map_range(Execution::Parallel, 10, |i| {
            if i >= 3 {
                Err(crate::Error::Contract(format!("fail {i}")))
            } else {
                Ok(i)
            }
        });
        assert!(matches!(r, Err(crate::Error::Contract(m)) if m == "fail 3"));
    }
}
