//! Worker-count plumbing. Per-sample work is embarrassingly parallel;
//! results are collected in index order so output bytes never depend on
//! the worker count. `SALIGRAPH_THREADS` caps the pool.

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "SALIGRAPH_THREADS";

#[cfg(feature = "parallel")]
mod imp {
    use std::sync::OnceLock;

    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

    fn pool() -> &'static rayon::ThreadPool {
        POOL.get_or_init(|| {
            let mut builder = rayon::ThreadPoolBuilder::new();
            if let Some(n) = super::env_thread_cap() {
                builder = builder.num_threads(n);
            }
            builder.build().expect("failed to build worker pool")
        })
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
        use rayon::prelude::*;
        pool().install(|| (0..n).into_par_iter().map(f).collect())
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    pub fn map_indexed<R>(n: usize, f: impl Fn(usize) -> R) -> Vec<R> {
        (0..n).map(f).collect()
    }
}

pub(crate) fn env_thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

pub use imp::map_indexed;
