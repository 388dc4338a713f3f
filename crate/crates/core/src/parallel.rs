//! Order-preserving map over independent jobs.
//!
//! Rollout episodes and sweep cells are independent, each seeded from its own
//! index, so any executor that returns results in input order yields the same
//! output as [`Sequential`].

use alloc::vec::Vec;

pub trait ParallelMap {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync;
}

/// Runs every job on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ParallelMap for Sequential {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync,
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}
