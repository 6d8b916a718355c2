//! Data-parallel dispatch over independent jobs.
//!
//! With the `parallel` feature (default) jobs run on the rayon pool; without
//! it, or with [`Dispatch::Sequential`], they run in order on the caller's
//! thread. Results are always returned in job order, and every job owns its
//! own random stream, so outputs are identical in both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dispatch {
    #[default]
    Parallel,
    Sequential,
}

impl Dispatch {
    /// True when jobs will actually run on more than one thread.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Dispatch::Parallel
    }
}

/// Map `f` over `0..n`.
pub fn map_range<R, F>(n: usize, dispatch: Dispatch, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if dispatch == Dispatch::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = dispatch;
    (0..n).map(f).collect()
}

/// Fallible [`map_range`]; returns the first error in job order.
pub fn try_map_range<R, F>(n: usize, dispatch: Dispatch, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Send + Sync,
{
    map_range(n, dispatch, f).into_iter().collect()
}
