//! Sorting hashed tokens into fixed-size chunks.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::stable_sort_with_permutation;

/// One hashing round: bucket ids, the stable sort by `(bucket, position)` and its inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketAssignment {
    pub round: usize,
    pub bucket_ids: Vec<usize>,
    /// Sorted position to original token.
    pub permutation: Vec<usize>,
    /// Original token to sorted position.
    pub inverse: Vec<usize>,
    pub chunk_size: usize,
}

impl BucketAssignment {
    pub fn chunk_count(&self) -> usize {
        self.permutation.len() / self.chunk_size
    }

    /// Original token indices of chunk `c`, in sorted order.
    pub fn chunk(&self, c: usize) -> &[usize] {
        &self.permutation[c * self.chunk_size..(c + 1) * self.chunk_size]
    }

    pub fn chunk_of(&self, token: usize) -> usize {
        self.inverse[token] / self.chunk_size
    }
}

/// Stable-sorts tokens by bucket id and cuts the order into chunks of `bucket_size`.
pub fn build_chunks(bucket_ids: &[usize], bucket_size: usize, round: usize) -> Result<BucketAssignment> {
    if bucket_size == 0 || !bucket_ids.len().is_multiple_of(bucket_size) {
        bail!(Internal, "{} tokens are not a whole number of {}-token chunks", bucket_ids.len(), bucket_size);
    }
    let sorted = stable_sort_with_permutation(bucket_ids);
    Ok(BucketAssignment {
        round,
        bucket_ids: bucket_ids.to_vec(),
        permutation: sorted.permutation,
        inverse: sorted.inverse,
        chunk_size: bucket_size,
    })
}
