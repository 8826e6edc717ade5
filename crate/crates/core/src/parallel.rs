//! Ordered data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over rayon; without it
//! every call runs on the calling thread. Output order always follows input
//! order, so results are identical under both strategies.

/// How a batch of independent work items is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Parallel over the global pool, or a dedicated pool of `width` threads.
    /// Falls back to sequential when built without the `parallel` feature.
    Parallel { width: Option<usize> },
    #[default]
    Auto,
}

impl Execution {
    pub fn with_width(width: usize) -> Self {
        if width <= 1 {
            Execution::Sequential
        } else {
            Execution::Parallel { width: Some(width) }
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && !matches!(self, Execution::Sequential)
    }

    /// Maps `f` over `items`, preserving input order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(f).collect(),
            Execution::Auto => par_map(items, None, f),
            Execution::Parallel { width } => par_map(items, width, f),
        }
    }

    /// Like [`Execution::map`] but also hands `f` the item index.
    pub fn map_indexed<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        let indexed: Vec<(usize, &T)> = items.iter().enumerate().collect();
        self.map(&indexed, |(i, t)| f(*i, t))
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], width: Option<usize>, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;

    if items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match width {
        Some(w) => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
            Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            Err(e) => {
                log::warn!("could not build a {w}-thread pool ({e}); running sequentially");
                items.iter().map(f).collect()
            }
        },
        None => items.par_iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: &[T], _width: Option<usize>, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_every_strategy() {
        let items: Vec<u64> = (0..1000).collect();
        let expected: Vec<u64> = items.iter().map(|x| x * x).collect();
        for exec in [
            Execution::Sequential,
            Execution::Auto,
            Execution::Parallel { width: Some(3) },
            Execution::with_width(1),
        ] {
            assert_eq!(exec.map(&items, |x| x * x), expected);
        }
    }

    #[test]
    fn indexed_map_passes_positions() {
        let items = vec!["a", "b", "c"];
        let out = Execution::Auto.map_indexed(&items, |i, s| format!("{i}{s}"));
        assert_eq!(out, vec!["0a", "1b", "2c"]);
    }

    #[test]
    fn empty_input() {
        let items: Vec<u8> = vec![];
        assert!(Execution::Auto.map(&items, |x| *x).is_empty());
    }
}
