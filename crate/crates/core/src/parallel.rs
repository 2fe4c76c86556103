//! Batch-axis work distribution.
//!
//! The convolution engine splits each batch into fixed-size chunks of
//! images and processes the chunks independently. With the `parallel`
//! feature (default) chunks run on the rayon pool; without it they run
//! in a plain loop. Chunk size and reduction order are identical in both
//! builds, so results are bit-for-bit the same.

/// Images per chunk. Governs the GEMM row count (`chunk * H * W`) and
/// the size of the im2col scratch buffer; 4 keeps the scratch around
/// 100 MB for 64x64 inputs at 65 channels while leaving the GEMM fat
/// enough to hit peak throughput.
pub(crate) const CHUNK_IMAGES: usize = 4;

/// Apply `f` to each (index, item) of `items`, returning outputs in
/// input order. `f` must be pure per item.
pub(crate) fn map_ordered<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}
