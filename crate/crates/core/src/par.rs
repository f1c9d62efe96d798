//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature these dispatch to rayon; without it they are
//! ordinary iterator loops. Outputs are always collected in input order, so
//! callers that reduce the returned vectors sequentially get the same bits
//! either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Pixels per work unit for chunked reductions. Fixed so that chunk
/// boundaries, and therefore floating-point summation order, never depend on
/// the thread count.
pub const CHUNK_PIXELS: usize = 256;

/// Applies `f` to every (output pixel, input pixel) pair.
pub fn zip_pixels<F>(out: &mut [f32], out_c: usize, input: &[f32], in_c: usize, f: F)
where
    F: Fn(&mut [f32], &[f32]) + Sync + Send,
{
    debug_assert_eq!(out.len() / out_c.max(1), input.len() / in_c.max(1));
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(out_c)
        .zip(input.par_chunks(in_c))
        .for_each(|(o, i)| f(o, i));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(out_c)
        .zip(input.chunks(in_c))
        .for_each(|(o, i)| f(o, i));
}

/// Maps every element of `items`, preserving order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    return items.par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    return items.iter().map(f).collect();
}

/// Maps `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    return (0..n).into_par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    return (0..n).map(f).collect();
}

/// Splits `0..n` into fixed chunks of [`CHUNK_PIXELS`] and maps each chunk
/// range, preserving order.
pub fn map_chunks<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK_PIXELS);
    map_range(chunks, |k| {
        let start = k * CHUNK_PIXELS;
        f(start..(start + CHUNK_PIXELS).min(n))
    })
}
