//! Index-ordered task execution, data-parallel when the `parallel` feature is
//! on. Results always come back in task order, so callers that fold them
//! left to right get the same bits in both modes.

use std::sync::Once;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const THREADS_ENV: &str = "MSDIFF_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    /// Uses the rayon pool; identical to `Sequential` without the feature.
    #[default]
    Parallel,
}

impl Exec {
    /// Whether tasks will actually run on several threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// `f(0), …, f(n-1)` in index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Like [`Exec::map`], stopping at the first error in index order.
    pub fn try_map<R, F>(self, n: usize, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> Result<R> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}

static POOL: Once = Once::new();

/// Size the global worker pool from `MSDIFF_THREADS` if it is set. Only the
/// first call has an effect.
pub fn configure_threads_from_env() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| crate::Error::Config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    configure_threads(n);
    Ok(())
}

pub fn configure_threads(n: usize) {
    POOL.call_once(|| {
        #[cfg(feature = "parallel")]
        {
            // Fails only if a pool already exists, which is fine.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        #[cfg(not(feature = "parallel"))]
        let _ = n;
    });
}
