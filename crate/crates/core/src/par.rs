//! Data-parallel helpers with a sequential fallback.
//!
//! Everything routed through here is embarrassingly parallel: each work item
//! writes only its own output slot, so results are bit-identical whether the
//! `parallel` feature is on or off and regardless of thread count. Reductions
//! that would depend on summation order are never parallelized.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of f32 multiply-accumulates before a matmul is worth
/// splitting across threads.
pub const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// Apply `f` to each `row_len` chunk of `data`, in parallel when available.
pub fn for_each_row<F>(data: &mut [f32], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    debug_assert!(row_len > 0 && data.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// Map `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Mutate each element of a slice independently, in parallel when available.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
    }
}
