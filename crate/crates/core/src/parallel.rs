//! Deterministic map-reduce over fixed-size shards.
//!
//! Work is cut into shards of a fixed size, each shard is mapped
//! independently, and the partial results are folded left to right in shard
//! order. The shard boundaries and fold order do not depend on the number of
//! threads, so the `parallel` feature (rayon) and the sequential fallback
//! produce bit-identical results.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Splits `0..len` into consecutive ranges of at most `shard` items.
pub fn shards(len: usize, shard: usize) -> Vec<Range<usize>> {
    let shard = shard.max(1);
    (0..len.div_ceil(shard))
        .map(|i| i * shard..((i + 1) * shard).min(len))
        .collect()
}

/// Maps every shard, preserving shard order in the output.
pub fn map_shards<T, F>(len: usize, shard: usize, map: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges = shards(len, shard);
    #[cfg(feature = "parallel")]
    {
        ranges.into_par_iter().map(map).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ranges.into_iter().map(map).collect()
    }
}

/// Maps every shard and folds the results left to right.
pub fn map_reduce<T, F, R>(len: usize, shard: usize, map: F, mut reduce: R) -> Option<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
    R: FnMut(T, T) -> T,
{
    let mut parts = map_shards(len, shard, map).into_iter();
    let first = parts.next()?;
    Some(parts.fold(first, &mut reduce))
}

/// Whether the crate was built with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
