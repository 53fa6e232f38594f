//! Execution policy for the data-parallel loops (per-location flow evaluation,
//! covariance assembly, kriging over targets).
//!
//! With the `parallel` feature the loops run on the rayon pool; without it, or
//! after `set_policy(Policy::Sequential)`, they run on the calling thread.
//! Results are always collected in index order, so both policies produce
//! bitwise-identical output.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Sequential,
    Parallel,
}

const SEQUENTIAL: u8 = 0;
const PARALLEL: u8 = 1;

static POLICY: AtomicU8 = AtomicU8::new(PARALLEL);

pub fn set_policy(policy: Policy) {
    let v = match policy {
        Policy::Sequential => SEQUENTIAL,
        Policy::Parallel => PARALLEL,
    };
    POLICY.store(v, Ordering::Relaxed);
}

/// The policy loops will actually use. Always `Sequential` when the crate is
/// built without the `parallel` feature.
pub fn policy() -> Policy {
    if cfg!(feature = "parallel") && POLICY.load(Ordering::Relaxed) == PARALLEL {
        Policy::Parallel
    } else {
        Policy::Sequential
    }
}

/// Evaluate `f` on `0..n` and collect the results in index order.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy() == Policy::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if policy() == Policy::Parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_under_both_policies() {
        let expected: Vec<usize> = (0..1000).map(|i| i * i).collect();
        for p in [Policy::Sequential, Policy::Parallel] {
            set_policy(p);
            assert_eq!(map(1000, |i| i * i), expected);
        }
        set_policy(Policy::Parallel);
    }

    #[test]
    fn chunks_cover_the_slice() {
        let mut v = vec![0usize; 103];
        for_each_chunk_mut(&mut v, 10, |c, chunk| {
            for (j, x) in chunk.iter_mut().enumerate() {
                *x = c * 10 + j;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| i == x));
    }
}
