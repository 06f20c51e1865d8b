//! Data-parallel execution over independent work items.
//!
//! Results always come back in input order and any reduction over them is
//! done sequentially by the caller, so sequential and parallel runs are
//! bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How to drive a batch of independent items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses the rayon global pool when the `parallel` feature is enabled,
    /// otherwise falls back to sequential.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Maps `f` over `items`, returning results in input order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel if items.len() > 1 => items
                .par_iter()
                .enumerate()
                .map(|(i, item)| f(i, item))
                .collect(),
            _ => items.iter().enumerate().map(|(i, item)| f(i, item)).collect(),
        }
    }
}
