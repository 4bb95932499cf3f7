//! Data-parallel helpers with a sequential fallback.
//!
//! Work is always split into the same fixed-size chunks and results are
//! returned in chunk order, so reductions performed by callers are
//! bit-identical whether the chunks ran on one thread or many.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution policy for batch work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// True when work will actually fan out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Map `f` over fixed-size chunks of `items`, preserving chunk order.
pub fn map_chunks<T, R, F>(par: Parallelism, items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        return items.par_chunks(chunk).map(f).collect();
    }
    let _ = par;
    items.chunks(chunk).map(f).collect()
}

/// Map `f` over every item, preserving order.
pub fn map_items<T, R, F>(par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = par;
    items.iter().map(f).collect()
}
