//! Data-parallel helpers. With the `parallel` feature the work is spread
//! over the rayon pool; without it (or after [`set_parallel(false)`]) every
//! helper runs sequentially on the calling thread. Results never depend on
//! which path ran: reductions are always combined in index order.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Toggle the parallel path at runtime. No-op without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// `f(i)` for `i in 0..n`, collected in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Calls `f(i, chunk)` on consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() > chunk_len {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Like [`for_each_chunk_mut`] but walks two equally chunked buffers in lockstep.
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    assert!(a_len > 0 && b_len > 0);
    assert_eq!(a.len() / a_len, b.len() / b_len);
    #[cfg(feature = "parallel")]
    if parallel_enabled() && a.len() > a_len {
        use rayon::prelude::*;
        a.par_chunks_mut(a_len)
            .zip(b.par_chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
        return;
    }
    for (i, (x, y)) in a.chunks_mut(a_len).zip(b.chunks_mut(b_len)).enumerate() {
        f(i, x, y);
    }
}
