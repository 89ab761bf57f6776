//! Data-parallel map over examples, with a sequential fallback.
//!
//! Results always come back in input order, so reductions performed by the
//! caller are identical whichever mode produced them.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

/// `f(i, &items[i])` for every item, in order.
pub fn map_indexed<T, R, F>(items: &[T], mode: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
        }
        _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}

/// Thread count from `XGPT_THREADS`, else the machine's parallelism.
pub fn default_threads() -> usize {
    std::env::var("XGPT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` with `threads` workers available to [`map_indexed`]. One thread
/// selects the sequential path outright.
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce(Parallelism) -> R + Send,
{
    if threads <= 1 {
        return f(Parallelism::Sequential);
    }
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(|| f(Parallelism::Parallel)),
            Err(_) => f(Parallelism::Sequential),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        f(Parallelism::Sequential)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_in_order() {
        let xs: Vec<u64> = (0..100).collect();
        let a = map_indexed(&xs, Parallelism::Sequential, |i, x| i as u64 * 1000 + x * x);
        let b = with_threads(4, |mode| map_indexed(&xs, mode, |i, x| i as u64 * 1000 + x * x));
        assert_eq!(a, b);
    }
}
