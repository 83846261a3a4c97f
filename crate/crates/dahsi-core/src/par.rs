//! Data-parallel task execution with a sequential fallback.
//!
//! Results come back in task order regardless of the worker count, so every
//! caller that merges sequentially over the returned `Vec` is deterministic.

#[cfg(feature = "parallel")]
pub fn run_tasks<T, U, F>(tasks: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    tasks.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_tasks<T, U, F>(tasks: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    tasks.into_iter().map(f).collect()
}

/// Whether this build executes tasks on a rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
