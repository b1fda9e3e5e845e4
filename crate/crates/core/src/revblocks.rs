//! Reversible residual blocks and the chunked feed-forward layer.
//!
//! A block maps a pair of streams `(x1, x2)` to
//! `y1 = x1 + F(x2)`, `y2 = x2 + G(y1)`, so the inputs can be recomputed from
//! the outputs: `x2 = y2 - G(y1)`, `x1 = y1 - F(x2)`. [`rev_backward`] uses
//! this to backpropagate through a stack while holding only the top pair of
//! activations.
//!
//! Streams are `[B * n, W]` row matrices; a concatenated `[B * n, 2W]`
//! activation splits into its first and second `W` channels.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{dense_attention_graph, lsh_attention_graph, AttentionConfig, AttentionVars, LshSeed, ScoreCounter, SeqLayout};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::params::{accumulate, Bound, ParamMap};
use crate::real::Real;
use crate::tensor::Tensor;

/// Layer-norm epsilon used by every pre-norm.
pub const NORM_EPS: f64 = 1e-6;

/// One residual branch: a function of a `[B * n, W]` stream.
pub trait Sublayer<T: Real> {
    /// Parameters read from the model's map.
    fn param_names(&self) -> Vec<String>;

    fn apply(&self, g: &mut Graph<T>, params: &Bound, x: Var, layout: &SeqLayout, counter: &mut ScoreCounter) -> Result<Var>;

    /// Whether a second evaluation on the same input is guaranteed to repeat
    /// the first; inversion and reconstruction require it.
    fn replayable(&self) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkedFFNConfig {
    pub hidden_dim: usize,
    /// Tokens (rows) per chunk.
    pub chunk_len: usize,
}

/// Feed-forward weights: `linear(D -> hidden) -> GELU -> linear(hidden -> D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T: Real = f64> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Applies the FFN to consecutive runs of `chunk_len` rows and stacks the results.
///
/// At most `chunk_len * hidden_dim` hidden activations exist per chunk evaluation.
pub fn chunked_ffn_graph<T: Real>(g: &mut Graph<T>, x: Var, cfg: &ChunkedFFNConfig, w: &FfnVars) -> Result<Var> {
    if cfg.chunk_len == 0 {
        bail!(Config, "chunk_len must be at least 1");
    }
    let (rows, _) = g.value(x).dims2()?;
    let ffn = |g: &mut Graph<T>, part: Var| -> Result<Var> {
        let h = g.linear(part, w.w1, Some(w.b1))?;
        let h = g.gelu(h)?;
        g.linear(h, w.w2, Some(w.b2))
    };
    if rows <= cfg.chunk_len {
        return ffn(g, x);
    }
    let mut parts = Vec::with_capacity(rows.div_ceil(cfg.chunk_len));
    for start in (0..rows).step_by(cfg.chunk_len) {
        let part = g.slice_rows(x, start, cfg.chunk_len.min(rows - start))?;
        parts.push(ffn(g, part)?);
    }
    g.concat_rows(&parts)
}

/// Chunked FFN over every token of `x` (`[B, n, D]` or `[rows, D]`); output has `x`'s shape.
pub fn chunked_ffn<T: Real>(x: &Tensor<T>, cfg: &ChunkedFFNConfig, params: &FfnParams<T>) -> Result<Tensor<T>> {
    let (rows, d) = x.last_dim()?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone().reshape(&[rows, d])?);
    let w = FfnVars {
        w1: g.constant(params.w1.clone()),
        b1: g.constant(params.b1.clone()),
        w2: g.constant(params.w2.clone()),
        b2: g.constant(params.b2.clone()),
    };
    let y = chunked_ffn_graph(&mut g, xv, cfg, &w)?;
    g.value(y).clone().reshape(x.shape())
}

/// Largest number of hidden activations alive at once for `rows` input rows.
pub fn peak_hidden_activations(rows: usize, cfg: &ChunkedFFNConfig) -> usize {
    rows.min(cfg.chunk_len) * cfg.hidden_dim
}

/// Which attention mechanism an [`AttentionSublayer`] runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Dense,
    /// LSH attention replaying the given hashing seed on every call.
    Lsh(LshSeed),
}

/// Pre-norm attention branch reading `{prefix}.attn_norm.*` and `{prefix}.attn.*`.
#[derive(Clone, Debug)]
pub struct AttentionSublayer {
    pub prefix: String,
    pub cfg: AttentionConfig,
    pub kind: AttentionKind,
}

impl AttentionSublayer {
    fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.prefix, leaf)
    }
}

impl<T: Real> Sublayer<T> for AttentionSublayer {
    fn param_names(&self) -> Vec<String> {
        let mut names = vec![self.name("attn_norm.gain"), self.name("attn_norm.bias"), self.name("attn.wq")];
        if !self.cfg.shared_qk {
            names.push(self.name("attn.wk"));
        }
        names.extend([self.name("attn.wv"), self.name("attn.wo"), self.name("attn.bo")]);
        names
    }

    fn apply(&self, g: &mut Graph<T>, p: &Bound, x: Var, layout: &SeqLayout, counter: &mut ScoreCounter) -> Result<Var> {
        let h = g.layer_norm(x, p.get(&self.name("attn_norm.gain"))?, p.get(&self.name("attn_norm.bias"))?, T::from_f64(NORM_EPS))?;
        let w = AttentionVars {
            wq: p.get(&self.name("attn.wq"))?,
            wk: if self.cfg.shared_qk { None } else { Some(p.get(&self.name("attn.wk"))?) },
            wv: p.get(&self.name("attn.wv"))?,
            wo: p.get(&self.name("attn.wo"))?,
            bo: p.get(&self.name("attn.bo"))?,
        };
        match self.kind {
            AttentionKind::Dense => dense_attention_graph(g, h, layout, &self.cfg, &w, counter),
            AttentionKind::Lsh(seed) => lsh_attention_graph(g, h, layout, &self.cfg, &w, seed, counter),
        }
    }
}

/// Pre-norm chunked feed-forward branch reading `{prefix}.ffn_norm.*` and `{prefix}.ffn.*`.
#[derive(Clone, Debug)]
pub struct FeedForwardSublayer {
    pub prefix: String,
    pub cfg: ChunkedFFNConfig,
}

impl FeedForwardSublayer {
    fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.prefix, leaf)
    }
}

impl<T: Real> Sublayer<T> for FeedForwardSublayer {
    fn param_names(&self) -> Vec<String> {
        ["ffn_norm.gain", "ffn_norm.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"].iter().map(|l| self.name(l)).collect()
    }

    fn apply(&self, g: &mut Graph<T>, p: &Bound, x: Var, _layout: &SeqLayout, _counter: &mut ScoreCounter) -> Result<Var> {
        let h = g.layer_norm(x, p.get(&self.name("ffn_norm.gain"))?, p.get(&self.name("ffn_norm.bias"))?, T::from_f64(NORM_EPS))?;
        let w = FfnVars {
            w1: p.get(&self.name("ffn.w1"))?,
            b1: p.get(&self.name("ffn.b1"))?,
            w2: p.get(&self.name("ffn.w2"))?,
            b2: p.get(&self.name("ffn.b2"))?,
        };
        chunked_ffn_graph(g, h, &self.cfg, &w)
    }
}

/// A reversible residual block with branches `F` (attention) and `G` (feed-forward).
pub struct ReversibleBlock<T: Real> {
    pub f: Box<dyn Sublayer<T>>,
    pub g: Box<dyn Sublayer<T>>,
}

impl<T: Real> ReversibleBlock<T> {
    pub fn new(f: impl Sublayer<T> + 'static, g: impl Sublayer<T> + 'static) -> Self {
        Self { f: Box::new(f), g: Box::new(g) }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.f.param_names();
        names.extend(self.g.param_names());
        names
    }

    pub fn replayable(&self) -> bool {
        self.f.replayable() && self.g.replayable()
    }
}

/// Splits `[rows, W]` into its first and second `W/2` channels.
pub fn split_halves<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, w) = x.dims2()?;
    if w % 2 != 0 {
        bail!(Config, "reversible stream width {} is odd", w);
    }
    Ok((x.slice_cols(0, w / 2)?, x.slice_cols(w / 2, w / 2)?))
}

/// Inverse of [`split_halves`].
pub fn merge_halves<T: Real>(x1: &Tensor<T>, x2: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::concat_cols(&[x1, x2])
}

fn check_pair<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (ra, wa) = a.dims2()?;
    let (rb, wb) = b.dims2()?;
    if ra != rb {
        bail!(Dimension, "stream row counts differ: {} vs {}", ra, rb);
    }
    if wa != wb {
        bail!(Config, "streams of widths {} and {} do not form an even split", wa, wb);
    }
    Ok(())
}

/// `(x1 + F(x2), x2 + G(y1))` on a graph.
pub fn rev_forward_graph<T: Real>(
    g: &mut Graph<T>,
    block: &ReversibleBlock<T>,
    params: &Bound,
    x1: Var,
    x2: Var,
    layout: &SeqLayout,
    counter: &mut ScoreCounter,
) -> Result<(Var, Var)> {
    check_pair(g.value(x1), g.value(x2))?;
    let f = block.f.apply(g, params, x2, layout, counter)?;
    let y1 = g.add(x1, f)?;
    let gy = block.g.apply(g, params, y1, layout, counter)?;
    let y2 = g.add(x2, gy)?;
    Ok((y1, y2))
}

/// Evaluates one branch on a value, without gradients.
fn eval_branch<T: Real>(
    branch: &dyn Sublayer<T>,
    params: &ParamMap<T>,
    x: &Tensor<T>,
    layout: &SeqLayout,
    counter: &mut ScoreCounter,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let names = branch.param_names();
    let bound = Bound::bind(&mut g, params, names.iter().map(String::as_str), false)?;
    let xv = g.constant(x.clone());
    let y = branch.apply(&mut g, &bound, xv, layout, counter)?;
    Ok(g.value(y).clone())
}

fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x - y)
}

/// `y1 = x1 + F(x2)`, `y2 = x2 + G(y1)`.
pub fn rev_forward<T: Real>(
    block: &ReversibleBlock<T>,
    params: &ParamMap<T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    layout: &SeqLayout,
    counter: &mut ScoreCounter,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pair(x1, x2)?;
    let y1 = add(x1, &eval_branch(&*block.f, params, x2, layout, counter)?)?;
    let y2 = add(x2, &eval_branch(&*block.g, params, &y1, layout, counter)?)?;
    Ok((y1, y2))
}

/// `x2 = y2 - G(y1)`, `x1 = y1 - F(x2)`.
pub fn rev_inverse<T: Real>(
    block: &ReversibleBlock<T>,
    params: &ParamMap<T>,
    y1: &Tensor<T>,
    y2: &Tensor<T>,
    layout: &SeqLayout,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pair(y1, y2)?;
    if !block.replayable() {
        bail!(Contract, "block contains a sub-layer whose randomness cannot be replayed");
    }
    let mut scratch = ScoreCounter::new();
    let x2 = sub(y2, &eval_branch(&*block.g, params, y1, layout, &mut scratch)?)?;
    let mut x1 = sub(y1, &eval_branch(&*block.f, params, &x2, layout, &mut scratch)?)?;
    crate::fault::perturb_inverse(&mut x1);
    Ok((x1, x2))
}

/// Result of backpropagating through one block from its outputs.
#[derive(Clone, Debug)]
pub struct RevBackward<T: Real> {
    /// Reconstructed inputs.
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
    /// Gradients with respect to the inputs.
    pub dx1: Tensor<T>,
    pub dx2: Tensor<T>,
    /// Parameter gradients of this block.
    pub grads: ParamMap<T>,
}

/// Reconstructs the block inputs from `(y1, y2)` and backpropagates `(dy1, dy2)`.
///
/// Each branch is re-evaluated once on a local graph; no activation from the
/// forward pass is needed.
#[allow(clippy::too_many_arguments)]
pub fn rev_backward<T: Real>(
    block: &ReversibleBlock<T>,
    params: &ParamMap<T>,
    y1: &Tensor<T>,
    y2: &Tensor<T>,
    dy1: &Tensor<T>,
    dy2: &Tensor<T>,
    layout: &SeqLayout,
) -> Result<RevBackward<T>> {
    check_pair(y1, y2)?;
    if !block.replayable() {
        bail!(Contract, "block contains a sub-layer whose randomness cannot be replayed");
    }
    let mut scratch = ScoreCounter::new();
    let mut grads = ParamMap::new();

    // G branch: x2 = y2 - G(y1); y1 receives dy2 through G.
    let mut g = Graph::new();
    let names = block.g.param_names();
    let bound = Bound::bind(&mut g, params, names.iter().map(String::as_str), true)?;
    let y1v = g.leaf(y1.clone().with_requires_grad(true));
    let gy = block.g.apply(&mut g, &bound, y1v, layout, &mut scratch)?;
    let back = g.backward_with(gy, dy2.clone())?;
    let dy1_total = add(dy1, &back.get_or_zeros(y1v, y1.shape()))?;
    let x2 = sub(y2, g.value(gy))?;
    accumulate(&mut grads, bound.collect(&g, &back))?;

    // F branch: x1 = y1 - F(x2); x2 receives dy1_total through F.
    let mut g = Graph::new();
    let names = block.f.param_names();
    let bound = Bound::bind(&mut g, params, names.iter().map(String::as_str), true)?;
    let x2v = g.leaf(x2.clone().with_requires_grad(true));
    let fx = block.f.apply(&mut g, &bound, x2v, layout, &mut scratch)?;
    let back = g.backward_with(fx, dy1_total.clone())?;
    let dx2 = add(dy2, &back.get_or_zeros(x2v, x2.shape()))?;
    let x1 = sub(y1, g.value(fx))?;
    accumulate(&mut grads, bound.collect(&g, &back))?;

    Ok(RevBackward { x1, x2, dx1: dy1_total, dx2, grads })
}

/// Runs a stack of blocks forward, keeping only the current pair.
pub fn stack_forward<T: Real>(
    blocks: &[ReversibleBlock<T>],
    params: &ParamMap<T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    layout: &SeqLayout,
    counter: &mut ScoreCounter,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut pair = (x1.clone(), x2.clone());
    for block in blocks {
        pair = rev_forward(block, params, &pair.0, &pair.1, layout, counter)?;
    }
    Ok(pair)
}

/// Recovers the stack inputs from its outputs.
pub fn stack_inverse<T: Real>(
    blocks: &[ReversibleBlock<T>],
    params: &ParamMap<T>,
    y1: &Tensor<T>,
    y2: &Tensor<T>,
    layout: &SeqLayout,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut pair = (y1.clone(), y2.clone());
    for block in blocks.iter().rev() {
        pair = rev_inverse(block, params, &pair.0, &pair.1, layout)?;
    }
    Ok(pair)
}

/// Backpropagates through a whole stack from its outputs, block by block.
#[allow(clippy::too_many_arguments)]
pub fn stack_backward<T: Real>(
    blocks: &[ReversibleBlock<T>],
    params: &ParamMap<T>,
    y1: &Tensor<T>,
    y2: &Tensor<T>,
    dy1: &Tensor<T>,
    dy2: &Tensor<T>,
    layout: &SeqLayout,
) -> Result<RevBackward<T>> {
    let mut state = RevBackward { x1: y1.clone(), x2: y2.clone(), dx1: dy1.clone(), dx2: dy2.clone(), grads: ParamMap::new() };
    for block in blocks.iter().rev() {
        let step = rev_backward(block, params, &state.x1, &state.x2, &state.dx1, &state.dx2, layout)?;
        accumulate(&mut state.grads, step.grads)?;
        state = RevBackward { grads: state.grads, ..step };
    }
    Ok(state)
}

/// Stored activation floats, in units of one scalar: `depth * n * D` for a
/// standard residual stack, `2 * n * D` for a reversible one.
pub fn activation_memory_estimate(depth: usize, n: usize, d: usize, reversible: bool) -> f64 {
    let per_layer = n as f64 * d as f64;
    if reversible {
        2.0 * per_layer
    } else {
        depth as f64 * per_layer
    }
}
