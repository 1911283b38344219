//! Order-preserving map over independent jobs.
//!
//! With the `parallel` feature the work runs on a rayon pool of the requested
//! size; without it, or with one worker, it runs in a plain loop. Output order
//! always matches input order.

/// Sequential reference implementation.
pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Runs `f` over `items` on `workers` threads.
#[cfg(feature = "parallel")]
pub fn map_parallel<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Dispatches to the parallel path when available and `workers > 1`.
pub fn map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if workers > 1 {
            return map_parallel(items, workers, f);
        }
    }
    let _ = workers;
    map_sequential(items, f)
}

/// Worker count after applying `PREFOPT_DETERMINISTIC=1`.
pub fn effective_workers(requested: usize) -> usize {
    match std::env::var("PREFOPT_DETERMINISTIC") {
        Ok(v) if v == "1" => 1,
        _ => requested.max(1),
    }
}

/// Default worker count: available parallelism.
pub fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u64> = (0..100).collect();
        let seq = map(&xs, 1, |x| x * x);
        let par = map(&xs, 4, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }
}
