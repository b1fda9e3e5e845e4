//! Multi-head self-attention in two flavours.
//!
//! [`dense`] evaluates every query-key pair. [`lsh`] hashes shared
//! query/key vectors with random rotations, sorts tokens by bucket, cuts the
//! sorted order into fixed-size chunks and lets each query attend to its own
//! chunk plus `lookback` preceding chunks, over `n_rounds` independent
//! hashes. Both paths report how many scores they evaluated through a
//! [`ScoreCounter`].

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub mod chunks;
pub mod dense;
pub mod hash;
pub mod lsh;

pub use chunks::{build_chunks, BucketAssignment};
pub use dense::{dense_attention, dense_attention_graph};
pub use hash::{lsh_hash, HashRotation};
pub use lsh::{candidate_sets, candidate_sets_for_keys, lsh_attention, lsh_attention_graph, LshSeed};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
    /// Tokens per chunk after sorting by bucket.
    pub bucket_size: usize,
    pub n_rounds: usize,
    /// Preceding chunks each query also attends to.
    pub lookback: usize,
    /// Queries and keys share one projection; keys are the L2-normalized queries.
    pub shared_qk: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            bail!(Config, "{} heads must evenly divide model dim {}", self.heads, self.model_dim);
        }
        if self.bucket_size < 2 {
            bail!(Config, "bucket size must be at least 2, got {}", self.bucket_size);
        }
        if self.n_rounds == 0 {
            bail!(Config, "at least one hashing round is required");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// `n` rounded up to a whole number of chunks.
    pub fn padded_len(&self, n: usize) -> usize {
        n.div_ceil(self.bucket_size) * self.bucket_size
    }

    /// Smallest even bucket count covering one bucket per chunk.
    pub fn n_buckets(&self, padded_len: usize) -> usize {
        let chunks = padded_len.div_ceil(self.bucket_size).max(1);
        (chunks + chunks % 2).max(2)
    }

    /// Upper bound on LSH scores for `n` real tokens, per head.
    pub fn lsh_score_bound(&self, n: usize) -> u64 {
        (n * self.bucket_size * (1 + self.lookback) * self.n_rounds) as u64
    }
}

/// Running count of query-key scores evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCounter {
    pub scores_evaluated: u64,
}

impl ScoreCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, scores: u64) {
        self.scores_evaluated += scores;
    }
}

/// Attention projection parameters as plain tensors.
///
/// `wk` is `None` for shared-QK attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T: Real = f64> {
    pub wq: Tensor<T>,
    pub wk: Option<Tensor<T>>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

impl<T: Real> AttentionParams<T> {
    pub fn random(cfg: &AttentionConfig, rng: &mut RngStream, std: f64) -> Self {
        let d = cfg.model_dim;
        let wq = rng.normal_tensor(&[d, d], std);
        let wk = (!cfg.shared_qk).then(|| rng.normal_tensor(&[d, d], std));
        let wv = rng.normal_tensor(&[d, d], std);
        let wo = rng.normal_tensor(&[d, d], std);
        let bo = rng.normal_tensor(&[d], std);
        Self { wq, wk, wv, wo, bo }
    }

    /// Same weights with keys tied to queries.
    pub fn shared(&self) -> Self {
        Self { wk: None, ..self.clone() }
    }

    pub fn bind(&self, g: &mut crate::graph::Graph<T>) -> AttentionVars {
        AttentionVars {
            wq: g.param(self.wq.clone()),
            wk: self.wk.as_ref().map(|w| g.param(w.clone())),
            wv: g.param(self.wv.clone()),
            wo: g.param(self.wo.clone()),
            bo: g.param(self.bo.clone()),
        }
    }
}

/// Attention parameters bound into a [`crate::graph::Graph`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Option<Var>,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Row layout of a `[batch * tokens, D]` token matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub tokens: usize,
    /// `false` marks padding; one entry per row.
    pub mask: Vec<bool>,
}

impl SeqLayout {
    pub fn dense(batch: usize, tokens: usize) -> Self {
        Self { batch, tokens, mask: alloc::vec![true; batch * tokens] }
    }

    pub fn item_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.tokens..(b + 1) * self.tokens]
    }

    pub fn rows(&self) -> usize {
        self.batch * self.tokens
    }
}
