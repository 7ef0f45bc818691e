//! Runs an indexed batch of independent jobs, on a rayon pool when the
//! `parallel` feature is enabled and sequentially otherwise.

#[cfg(feature = "parallel")]
use std::sync::Arc;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone)]
pub enum Executor {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel(Arc<rayon::ThreadPool>),
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Executor({})", self.name())
    }
}

impl Executor {
    /// A pool of `workers` threads, or the sequential executor when the
    /// `parallel` feature is off or `workers` is 1.
    pub fn with_workers(workers: usize) -> Self {
        #[cfg(feature = "parallel")]
        if workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .thread_name(|i| format!("load-{i}"))
                .build()
                .expect("thread pool");
            return Executor::Parallel(Arc::new(pool));
        }
        let _ = workers;
        Executor::Sequential
    }

    pub fn workers(&self) -> usize {
        match self {
            Executor::Sequential => 1,
            #[cfg(feature = "parallel")]
            Executor::Parallel(pool) => pool.current_num_threads(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Executor::Sequential => "sequential",
            #[cfg(feature = "parallel")]
            Executor::Parallel(_) => "rayon",
        }
    }

    /// `f(0), f(1), ..., f(n-1)`, results in index order.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Executor::Sequential => (0..n).map(f).collect(),
            // One item per task so every worker behaves like an independent
            // client pulling the next request.
            #[cfg(feature = "parallel")]
            Executor::Parallel(pool) => {
                pool.install(|| (0..n).into_par_iter().with_max_len(1).map(f).collect())
            }
        }
    }
}
