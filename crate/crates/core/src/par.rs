//! Data-parallel helpers with a sequential fallback.
//!
//! Batch loops in this crate (query batches, oracle scans, record scoring,
//! per-record embeddings) go through these functions. With the `parallel`
//! feature they run on rayon; without it, or with
//! [`ExecMode::Sequential`], they run inline. Results are collected in
//! input order, so both paths return identical values.

/// Execution mode for batch loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    /// Rayon-backed when the `parallel` feature is on; otherwise behaves
    /// like `Sequential`.
    Parallel,
}

impl ExecMode {
    /// The crate-wide default: parallel when compiled in, else sequential.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Maps `f` over `items`, preserving input order in the output.
pub fn map<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.iter().map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().map(f).collect()
            }
        }
    }
}

/// Indexed variant of [`map`].
pub fn map_indexed<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
        }
    }
}

/// Runs two closures, concurrently when allowed, and returns both results.
pub fn join<A, B, RA, RB>(mode: ExecMode, a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    match mode {
        ExecMode::Sequential => (a(), b()),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                rayon::join(a, b)
            }
            #[cfg(not(feature = "parallel"))]
            {
                (a(), b())
            }
        }
    }
}
