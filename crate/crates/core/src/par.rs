//! Deterministic chunked reduction used by the sample-average oracles.
//!
//! Samples are split into fixed-size chunks; each chunk is accumulated
//! sequentially and the per-chunk results are combined in chunk order. The
//! parallel path (rayon, `parallel` feature) and the sequential path share
//! that structure, so both produce bit-identical results regardless of
//! thread count. The chunk size is part of that contract: changing it
//! changes the rounding of the reduction.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Samples per reduction chunk.
pub const CHUNK: usize = 2048;

/// How a sample-average oracle walks its sample set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for ExecMode {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        ExecMode::Parallel
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        ExecMode::Sequential
    }
}

fn chunk_ranges(n: usize) -> Vec<Range<usize>> {
    (0..n).step_by(CHUNK).map(|lo| lo..(lo + CHUNK).min(n)).collect()
}

/// Map each chunk range to a partial result, then fold the partials in chunk
/// order.
pub fn map_reduce_chunks<R, Map, Fold, Acc>(
    mode: ExecMode,
    n_items: usize,
    map: Map,
    init: Acc,
    mut fold: Fold,
) -> Acc
where
    R: Send,
    Map: Fn(Range<usize>) -> R + Sync + Send,
    Fold: FnMut(Acc, R) -> Acc,
{
    let ranges = chunk_ranges(n_items);
    match mode {
        ExecMode::Sequential => ranges.into_iter().map(map).fold(init, |acc, r| fold(acc, r)),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            let partials: Vec<R> = ranges.into_par_iter().map(map).collect();
            partials.into_iter().fold(init, |acc, r| fold(acc, r))
        }
    }
}
