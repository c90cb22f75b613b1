//! Execution strategy for data-parallel loops.

use serde::{Deserialize, Serialize};

/// How index-parallel work is scheduled.
///
/// `Parallel` uses rayon when the crate is built with the `parallel` feature
/// and silently degrades to `Sequential` without it. Every loop routed through
/// here produces its output in index order, so both modes give identical
/// results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when work will actually be spread over a thread pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// `(0..n).map(f).collect()`, possibly in parallel. `min_len` is the
    /// smallest chunk of indices handed to one task.
    pub fn map<T, F>(self, n: usize, min_len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().with_min_len(min_len.max(1)).map(f).collect();
        }
        let _ = min_len;
        (0..n).map(f).collect()
    }

    /// Applies `f(i, &mut out[i])` to every element, possibly in parallel.
    pub fn for_each_mut<T, F>(self, out: &mut [T], min_len: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            out.par_iter_mut()
                .with_min_len(min_len.max(1))
                .enumerate()
                .for_each(|(i, x)| f(i, x));
            return;
        }
        let _ = min_len;
        out.iter_mut().enumerate().for_each(|(i, x)| f(i, x));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        assert_eq!(Exec::Sequential.map(1000, 7, f), Exec::Parallel.map(1000, 7, f));
        let mut a = vec![0.0; 100];
        let mut b = vec![0.0; 100];
        Exec::Sequential.for_each_mut(&mut a, 3, |i, x| *x = i as f64 * 0.5);
        Exec::Parallel.for_each_mut(&mut b, 3, |i, x| *x = i as f64 * 0.5);
        assert_eq!(a, b);
    }
}
