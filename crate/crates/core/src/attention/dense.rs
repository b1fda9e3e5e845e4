//! Full multi-head attention over every query-key pair.

use alloc::vec::Vec;

use super::{AttentionConfig, AttentionParams, AttentionVars, ScoreCounter, SeqLayout};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tokenizer::TokenSequence;

/// Dense attention over `x: [batch * tokens, D]`.
///
/// Per head: `softmax(Q K^T / sqrt(D_h) + mask) V`; heads are concatenated and
/// projected by `wo`, `bo`. With `w.wk == None` the keys are the row-normalized
/// queries (shared-QK). Adds `tokens^2` per head and item to `counter`.
pub fn dense_attention_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    layout: &SeqLayout,
    cfg: &AttentionConfig,
    w: &AttentionVars,
    counter: &mut ScoreCounter,
) -> Result<Var> {
    cfg.validate()?;
    if cfg.shared_qk != w.wk.is_none() {
        bail!(Config, "shared_qk={} but key projection {}", cfg.shared_qk, if w.wk.is_some() { "given" } else { "missing" });
    }
    let (rows, d) = g.value(x).dims2()?;
    if rows != layout.rows() || d != cfg.model_dim {
        bail!(Dimension, "attention input [{}, {}] does not match layout/config", rows, d);
    }
    let dh = cfg.head_dim();
    let n = layout.tokens;
    let scale = T::from_f64(1.0 / libm::sqrt(dh as f64));
    let q_all = g.matmul(x, w.wq)?;
    let k_all = match w.wk {
        Some(wk) => Some(g.matmul(x, wk)?),
        None => None,
    };
    let v_all = g.matmul(x, w.wv)?;

    let mut items = Vec::with_capacity(layout.batch);
    for b in 0..layout.batch {
        let item = |g: &mut Graph<T>, v: Var| if layout.batch == 1 { Ok(v) } else { g.slice_rows(v, b * n, n) };
        let q_b = item(g, q_all)?;
        let k_b = match k_all {
            Some(k) => Some(item(g, k)?),
            None => None,
        };
        let v_b = item(g, v_all)?;
        let mask = layout.item_mask(b);
        let key_mask = if mask.iter().all(|&m| m) { None } else { Some(mask) };
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let q = g.slice_cols(q_b, h * dh, dh)?;
            let k = match k_b {
                Some(k) => g.slice_cols(k, h * dh, dh)?,
                None => g.normalize_rows(q)?,
            };
            let v = g.slice_cols(v_b, h * dh, dh)?;
            let s = g.matmul_t(q, k)?;
            let s = g.scale(s, scale)?;
            let p = g.softmax_rows(s, key_mask)?;
            heads.push(g.matmul(p, v)?);
            counter.add((n * n) as u64);
        }
        items.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
    }
    let o = if items.len() == 1 { items[0] } else { g.concat_rows(&items)? };
    g.linear(o, w.wo, Some(w.bo))
}

/// Dense attention on a token sequence with plain-tensor parameters.
pub fn dense_attention<T: Real>(
    seq: &TokenSequence<T>,
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
    counter: &mut ScoreCounter,
) -> Result<TokenSequence<T>> {
    let mut g = Graph::new();
    let x = g.constant(seq.rows()?);
    let w = params.bind(&mut g);
    let y = dense_attention_graph(&mut g, x, &seq.layout(), cfg, &w, counter)?;
    seq.with_rows(g.value(y).clone())
}
