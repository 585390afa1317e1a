//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) [`map`] fans out over the rayon
//! global pool; without it, it is a plain iterator map. Output order always
//! matches input order, so results never depend on scheduling.

/// Order-preserving map over independent work items.
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

/// Sequential reference path, always available.
pub fn map_sequential<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..1000).collect();
        let par = map(xs.clone(), |x| x * x);
        let seq = map_sequential(xs, |x| x * x);
        assert_eq!(par, seq);
    }
}
