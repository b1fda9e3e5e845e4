//! LSH bucketed attention with shared query/key projections.
//!
//! For each head and round the (normalized) keys are hashed, stable-sorted by
//! bucket and cut into chunks of `bucket_size`. A query's candidates are the
//! tokens of its chunk and the `lookback` chunks before it in sorted order.
//! Candidates from all rounds are merged (deduplicated, self included) and a
//! single softmax runs over the merged set, so once the merged sets cover
//! every token the result equals dense shared-QK attention.
//!
//! Sequences are padded to a multiple of `bucket_size`; padding tokens get a
//! reserved bucket id past every real bucket, are never candidates, and
//! produce no output.

use alloc::vec;
use alloc::vec::Vec;

use super::{build_chunks, lsh_hash, AttentionConfig, AttentionParams, AttentionVars, ScoreCounter, SeqLayout};
use crate::error::{bail, Result};
use crate::graph::{Candidates, Graph, Var};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

/// Hashing seed of one attention layer; rounds and heads derive sub-streams from it.
pub type LshSeed = u64;

/// Random stream for `(round, head)` of a layer.
pub fn hash_stream(seed: LshSeed, round: usize, head: usize) -> RngStream {
    RngStream::derive(seed, &[round as u64, head as u64])
}

/// Merged candidate sets for one head of one padded item.
///
/// `keys: [n_padded, D_h]`; `valid[i]` is false for padding. Invalid queries
/// get empty sets.
pub fn candidate_sets_for_keys<T: Real>(
    keys: &Tensor<T>,
    valid: &[bool],
    cfg: &AttentionConfig,
    seed: LshSeed,
    head: usize,
) -> Result<Candidates> {
    cfg.validate()?;
    let (n, _) = keys.dims2()?;
    if valid.len() != n {
        bail!(Dimension, "validity mask has {} entries for {} keys", valid.len(), n);
    }
    let n_buckets = cfg.n_buckets(n);
    let mut sets: Candidates = vec![Vec::new(); n];
    let mut window = Vec::new();
    for round in 0..cfg.n_rounds {
        let mut ids = lsh_hash(keys, n_buckets, &mut hash_stream(seed, round, head))?;
        for (id, &ok) in ids.iter_mut().zip(valid) {
            if !ok {
                *id = n_buckets;
            }
        }
        let assignment = build_chunks(&ids, cfg.bucket_size, round)?;
        for c in 0..assignment.chunk_count() {
            window.clear();
            for cc in c.saturating_sub(cfg.lookback)..=c {
                window.extend(assignment.chunk(cc).iter().filter(|&&t| valid[t]).map(|&t| t as u32));
            }
            for &t in assignment.chunk(c) {
                if valid[t] {
                    sets[t].extend_from_slice(&window);
                }
            }
        }
    }
    for (i, set) in sets.iter_mut().enumerate() {
        if valid[i] {
            set.push(i as u32);
            set.sort_unstable();
            set.dedup();
        } else {
            set.clear();
        }
    }
    Ok(sets)
}

/// LSH attention over `x: [batch * tokens, D]`; `w.wq` is the shared query/key projection.
///
/// Adds the total size of all candidate sets to `counter`.
pub fn lsh_attention_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    layout: &SeqLayout,
    cfg: &AttentionConfig,
    w: &AttentionVars,
    seed: LshSeed,
    counter: &mut ScoreCounter,
) -> Result<Var> {
    lsh_impl(g, x, layout, cfg, w, seed, counter, None)
}

#[allow(clippy::too_many_arguments)]
fn lsh_impl<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    layout: &SeqLayout,
    cfg: &AttentionConfig,
    w: &AttentionVars,
    seed: LshSeed,
    counter: &mut ScoreCounter,
    mut trace: Option<&mut Vec<Vec<Candidates>>>,
) -> Result<Var> {
    cfg.validate()?;
    if !cfg.shared_qk || w.wk.is_some() {
        bail!(Config, "LSH attention requires shared query/key projections");
    }
    let (rows, d) = g.value(x).dims2()?;
    if rows != layout.rows() || d != cfg.model_dim {
        bail!(Dimension, "attention input [{}, {}] does not match layout/config", rows, d);
    }
    let n = layout.tokens;
    let n_pad = cfg.padded_len(n);
    let dh = cfg.head_dim();
    let scale = T::from_f64(1.0 / libm::sqrt(dh as f64));
    let qk_all = g.matmul(x, w.wq)?;
    let v_all = g.matmul(x, w.wv)?;

    let mut items = Vec::with_capacity(layout.batch);
    for b in 0..layout.batch {
        let qk_b = if layout.batch == 1 { qk_all } else { g.slice_rows(qk_all, b * n, n)? };
        let v_b = if layout.batch == 1 { v_all } else { g.slice_rows(v_all, b * n, n)? };
        let qk_b = g.pad_rows(qk_b, n_pad)?;
        let v_b = g.pad_rows(v_b, n_pad)?;
        let mut valid = layout.item_mask(b).to_vec();
        valid.resize(n_pad, false);

        let mut heads = Vec::with_capacity(cfg.heads);
        let mut item_trace = Vec::new();
        for h in 0..cfg.heads {
            let q = g.slice_cols(qk_b, h * dh, dh)?;
            let k = g.normalize_rows(q)?;
            let v = g.slice_cols(v_b, h * dh, dh)?;
            let cands = candidate_sets_for_keys(g.value(k), &valid, cfg, seed, h)?;
            if cands.iter().zip(&valid).any(|(c, &ok)| ok && c.is_empty()) {
                bail!(Internal, "empty candidate set for a real query");
            }
            counter.add(cands.iter().map(|c| c.len() as u64).sum());
            if trace.is_some() {
                item_trace.push(cands[..n].to_vec());
            }
            heads.push(g.candidate_attention(q, k, v, cands, scale)?);
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(item_trace);
        }
        let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        items.push(if n_pad == n { o } else { g.slice_rows(o, 0, n)? });
    }
    let o = if items.len() == 1 { items[0] } else { g.concat_rows(&items)? };
    g.linear(o, w.wo, Some(w.bo))
}

/// LSH attention on a token sequence with plain-tensor parameters.
pub fn lsh_attention<T: Real>(
    seq: &TokenSequence<T>,
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
    seed: LshSeed,
    counter: &mut ScoreCounter,
) -> Result<TokenSequence<T>> {
    let mut g = Graph::new();
    let x = g.constant(seq.rows()?);
    let w = params.bind(&mut g);
    let y = lsh_attention_graph(&mut g, x, &seq.layout(), cfg, &w, seed, counter)?;
    seq.with_rows(g.value(y).clone())
}

/// The exact candidate sets `lsh_attention` uses, indexed `[item][head][query]`.
pub fn candidate_sets<T: Real>(
    seq: &TokenSequence<T>,
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
    seed: LshSeed,
) -> Result<Vec<Vec<Candidates>>> {
    let mut g = Graph::new();
    let x = g.constant(seq.rows()?);
    let w = params.bind(&mut g);
    let mut trace = Vec::new();
    lsh_impl(&mut g, x, &seq.layout(), cfg, &w, seed, &mut ScoreCounter::new(), Some(&mut trace))?;
    Ok(trace)
}
