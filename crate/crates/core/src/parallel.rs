//! Data-parallel execution helpers.
//!
//! All batch-level parallelism in the crate routes through this module so the
//! `parallel` feature flag lives in exactly one place. Every helper partitions
//! its output into disjoint chunks and each chunk is computed with a fixed
//! sequential inner order, so results are bit-identical whether they run on a
//! rayon pool of any size or on the sequential fallback.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(index, chunk)` over consecutive disjoint chunks of `data`.
/// `data.len()` must be a multiple of `chunk`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0 && data.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk`] but walks two buffers chunked in lockstep
/// (e.g. per-channel weight and bias gradient slices).
pub fn for_each_chunk_pair<A, B, F>(a: &mut [A], ca: usize, b: &mut [B], cb: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync,
{
    debug_assert!(ca > 0 && cb > 0);
    debug_assert_eq!(a.len() / ca, b.len() / cb);
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(ca)
        .zip(b.par_chunks_mut(cb))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(ca)
        .zip(b.chunks_mut(cb))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// Collects `f(0..n)` preserving index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// True when this build dispatches onto a rayon pool.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_indices_line_up() {
        let mut v = vec![0usize; 12];
        for_each_chunk(&mut v, 3, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn chunk_pairs_stay_in_lockstep() {
        let mut a = vec![0usize; 6];
        let mut b = vec![0usize; 3];
        for_each_chunk_pair(&mut a, 2, &mut b, 1, |i, x, y| {
            x.iter_mut().for_each(|v| *v = i);
            y[0] = i * 10;
        });
        assert_eq!(a, vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(b, vec![0, 10, 20]);
    }

    #[test]
    fn map_indexed_preserves_order() {
        assert_eq!(map_indexed(4, |i| i * i), vec![0, 1, 4, 9]);
    }
}
