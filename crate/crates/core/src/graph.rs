//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for every node that depends on a
//! leaf created with `requires_grad`. Matrices are row-major `[rows, cols]`;
//! token batches use the `[batch * tokens, channels]` layout throughout.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::real::Real;
use crate::tensor::{ensure_finite, gemm, layer_norm_raw, softmax_rows_with, ConvGeom, NormCache, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-query candidate key lists for [`Graph::candidate_attention`].
pub type Candidates = Vec<Vec<u32>>;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, cache: NormCache<T> },
    Softmax(Var),
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    AddChannelBias(Var, Var),
    Patchify { x: Var, patch: usize },
    AddPositions { x: Var, table: Var, n: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    NormalizeRows { x: Var, norms: Vec<T> },
    CandidateAttention { q: Var, k: Var, v: Var, cands: Candidates, scale: T, probs: Vec<Vec<T>> },
    MaskedMeanPool { x: Var, inv_counts: Vec<T>, tokens: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T>, weight: T },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const NORM_FLOOR: f64 = 1e-12;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        ensure_finite(value.data(), name)?;
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a leaf; it receives a gradient when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that requires a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (br, bc) = self.dims2(b)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            bail!(Dimension, "matmul inner extents {} and {} differ", k, k2);
        }
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a).data(), false, self.value(b).data(), trans_b, m, k, n, &mut out, false);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b }, &[a, b], "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &'static str) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        self.push(value, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a], "scale")
    }

    /// Adds a `[p]` bias to every row of `[m, p]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, p) = self.dims2(x)?;
        if self.shape(bias) != [p] {
            bail!(Dimension, "bias shape {:?} does not match {} columns", self.shape(bias), p);
        }
        let b = self.value(bias).data();
        let mut value = self.value(x).clone().with_requires_grad(false);
        for row in value.data_mut().chunks_exact_mut(p) {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
        }
        self.push(value, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x], "gelu")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (_, d) = self.value(x).last_dim()?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            bail!(Dimension, "layer norm affine params must be [{}]", d);
        }
        let (out, cache) =
            layer_norm_raw(self.value(x).data(), d, self.value(gain).data(), self.value(bias).data(), eps)?;
        let value = Tensor::new(self.shape(x), out)?;
        self.push(value, Op::LayerNorm { x, gain, bias, cache }, &[x, gain, bias], "layer_norm")
    }

    /// Row softmax; `key_mask[j] == false` excludes column `j` in every row.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let out = match key_mask {
            Some(m) => {
                if m.len() != c {
                    bail!(Dimension, "key mask length {} != {} columns", m.len(), c);
                }
                softmax_rows_with(self.value(x).data(), r, c, |_, j| m[j])?
            }
            None => softmax_rows_with(self.value(x).data(), r, c, |_, _| true)?,
        };
        self.push(Tensor::new(&[r, c], out)?, Op::Softmax(x), &[x], "softmax")
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let out = geom.forward(self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(&geom.out_shape(), out)?;
        self.push(value, Op::Conv2d { input, kernel, geom }, &[input, kernel], "conv2d")
    }

    /// Adds a per-channel bias to `[B, C, H, W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let &[_, c, h, w] = self.shape(x) else {
            bail!(Dimension, "channel bias expects [B,C,H,W], got {:?}", self.shape(x));
        };
        if self.shape(bias) != [c] {
            bail!(Dimension, "channel bias must be [{}]", c);
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone().with_requires_grad(false);
        for (i, plane) in value.data_mut().chunks_exact_mut(h * w).enumerate() {
            let bb = b[i % c];
            plane.iter_mut().for_each(|v| *v += bb);
        }
        self.push(value, Op::AddChannelBias(x, bias), &[x, bias], "add_channel_bias")
    }

    /// `[B, C, H, W]` to `[B * n, C * P * P]`: one row per non-overlapping patch in
    /// row-major grid order, features ordered `(channel, row, col)` within the patch.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let &[b, c, h, w] = self.shape(x) else {
            bail!(Dimension, "patchify expects [B,C,H,W], got {:?}", self.shape(x));
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            bail!(Config, "patch size {} must divide image {}x{}", patch, h, w);
        }
        let (gh, gw) = (h / patch, w / patch);
        let feat = c * patch * patch;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * gh * gw * feat];
        for_each_patch_elem(b, c, h, w, patch, |dst, s| out[dst] = src[s]);
        let value = Tensor::new(&[b * gh * gw, feat], out)?;
        self.push(value, Op::Patchify { x, patch }, &[x], "patchify")
    }

    /// Adds `table[t]` to token `t` of every item in `[B * n, D]`.
    pub fn add_positions(&mut self, x: Var, table: Var, n: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        let (n_max, td) = self.dims2(table)?;
        if td != d {
            bail!(Dimension, "position table width {} != {}", td, d);
        }
        if n > n_max {
            bail!(Config, "sequence of {} tokens exceeds position table of {}", n, n_max);
        }
        if n == 0 || rows % n != 0 {
            bail!(Dimension, "{} rows is not a whole number of {}-token items", rows, n);
        }
        let t = self.value(table).data();
        let mut value = self.value(x).clone().with_requires_grad(false);
        for (r, row) in value.data_mut().chunks_exact_mut(d).enumerate() {
            let pos = &t[(r % n) * d..(r % n + 1) * d];
            row.iter_mut().zip(pos).for_each(|(v, &p)| *v += p);
        }
        self.push(value, Op::AddPositions { x, table, n }, &[x, table], "add_positions")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, len)?;
        self.push(value, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        self.push(value, Op::SliceRows { x, start }, &[x], "slice_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "nothing to concatenate");
        };
        let (_, c) = self.dims2(first)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p)?;
            if pc != c {
                bail!(Dimension, "column count {} != {}", pc, c);
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, c], data)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    /// Appends zero rows until `x` has `total` rows.
    pub fn pad_rows(&mut self, x: Var, total: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if total < r {
            bail!(Dimension, "cannot pad {} rows down to {}", r, total);
        }
        if total == r {
            return Ok(x);
        }
        let pad = self.constant(Tensor::zeros(&[total - r, c]));
        self.concat_rows(&[x, pad])
    }

    /// Divides each row by its Euclidean norm (floored at 1e-12).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims2(x)?;
        let floor = T::from_f64(NORM_FLOOR);
        let mut value = self.value(x).clone().with_requires_grad(false);
        let mut norms = Vec::new();
        for row in value.data_mut().chunks_exact_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(value, Op::NormalizeRows { x, norms }, &[x], "normalize_rows")
    }

    /// Attention where query `i` attends only to keys `cands[i]`.
    ///
    /// Queries with an empty candidate list produce a zero row.
    pub fn candidate_attention(&mut self, q: Var, k: Var, v: Var, cands: Candidates, scale: T) -> Result<Var> {
        let (n, dh) = self.dims2(q)?;
        if self.dims2(k)? != (n, dh) {
            bail!(Dimension, "keys must match queries [{}, {}]", n, dh);
        }
        let (vn, dv) = self.dims2(v)?;
        if vn != n || cands.len() != n {
            bail!(Dimension, "values/candidates must cover {} tokens", n);
        }
        if cands.iter().flatten().any(|&j| j as usize >= n) {
            bail!(Internal, "candidate index out of range");
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); n * dv];
        let mut probs = Vec::with_capacity(n);
        for (i, c) in cands.iter().enumerate() {
            if c.is_empty() {
                probs.push(Vec::new());
                continue;
            }
            let qi = &qd[i * dh..(i + 1) * dh];
            let mut s: Vec<T> = c
                .iter()
                .map(|&j| dot(qi, &kd[j as usize * dh..(j as usize + 1) * dh]) * scale)
                .collect();
            let max = s.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in s.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            let inv = T::one() / total;
            let oi = &mut out[i * dv..(i + 1) * dv];
            for (p, &j) in s.iter_mut().zip(c) {
                *p *= inv;
                let vj = &vd[j as usize * dv..(j as usize + 1) * dv];
                oi.iter_mut().zip(vj).for_each(|(o, &x)| *o += *p * x);
            }
            probs.push(s);
        }
        let value = Tensor::new(&[n, dv], out)?;
        self.push(value, Op::CandidateAttention { q, k, v, cands, scale, probs }, &[q, k, v], "candidate_attention")
    }

    /// Mean over unmasked tokens of each item in `[B * n, D]`, giving `[B, D]`.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool], tokens: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        if tokens == 0 || rows % tokens != 0 || mask.len() != rows {
            bail!(Dimension, "pool expects {} rows of whole {}-token items with a matching mask", rows, tokens);
        }
        let batch = rows / tokens;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); batch * d];
        let mut inv_counts = Vec::with_capacity(batch);
        for b in 0..batch {
            let count = mask[b * tokens..(b + 1) * tokens].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::DegenerateRow { row: b });
            }
            let inv = T::one() / T::from_f64(count as f64);
            inv_counts.push(inv);
            let o = &mut out[b * d..(b + 1) * d];
            for t in 0..tokens {
                if mask[b * tokens + t] {
                    let r = &src[(b * tokens + t) * d..(b * tokens + t + 1) * d];
                    o.iter_mut().zip(r).for_each(|(a, &v)| *a += v);
                }
            }
            o.iter_mut().for_each(|a| *a *= inv);
        }
        // Per-row weights: 1/count for kept rows, 0 for masked ones.
        let weights = mask
            .iter()
            .enumerate()
            .map(|(r, &m)| if m { inv_counts[r / tokens] } else { T::zero() })
            .collect();
        let op = Op::MaskedMeanPool { x, inv_counts: weights, tokens };
        self.push(Tensor::new(&[batch, d], out)?, op, &[x], "masked_mean_pool")
    }

    /// `weight * sum_b -log softmax(logits_b)[label_b]`; `weight = 1/B` gives the batch mean.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weight: T) -> Result<Var> {
        let (b, c) = self.dims2(logits)?;
        if labels.len() != b {
            bail!(Dimension, "{} labels for {} rows", labels.len(), b);
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            bail!(Data, "label {} out of range for {} classes", l, c);
        }
        let probs = softmax_rows_with(self.value(logits).data(), b, c, |_, _| true)?;
        let src = self.value(logits).data();
        let mut total = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[l];
        }
        let value = Tensor::scalar(total * weight);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs, weight };
        self.push(value, op, &[logits], "cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x], "sum")
    }

    /// Reverse-mode gradients of a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let seed = Tensor::ones(self.shape(loss));
        self.backward_with(loss, seed)
    }

    /// Reverse-mode gradients seeded with `grad` at `output`.
    pub fn backward_with(&self, output: Var, grad: Tensor<T>) -> Result<Gradients<T>> {
        if grad.shape() != self.shape(output) {
            bail!(Dimension, "seed gradient {:?} does not match output {:?}", grad.shape(), self.shape(output));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(grad.into_data());
        for i in (0..=output.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.tracked => Tensor::new(n.value.shape(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.tracked(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.value(v).len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims2(a)?;
                let n = gy.len() / m;
                // dA = dY * op(B)^T ; dB = A^T * dY (or its transpose).
                self.acc(grads, a, |ga| gemm(gy, false, self.value(b).data(), !trans_b, m, n, k, ga, true));
                self.acc(grads, b, |gb| {
                    if trans_b {
                        gemm(gy, true, self.value(a).data(), false, n, m, k, gb, true)
                    } else {
                        gemm(self.value(a).data(), true, gy, false, k, m, n, gb, true)
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |g| add_into(g, gy));
                self.acc(grads, b, |g| add_into(g, gy));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |g| add_into(g, gy));
                self.acc(grads, b, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |g| g.iter_mut().zip(gy).zip(bv).for_each(|((g, &d), &y)| *g += d * y));
                self.acc(grads, b, |g| g.iter_mut().zip(gy).zip(av).for_each(|((g, &d), &x)| *g += d * x));
            }
            &Op::Scale(a, s) => self.acc(grads, a, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * s)),
            &Op::AddBias(x, bias) => {
                self.acc(grads, x, |g| add_into(g, gy));
                let p = self.value(bias).len();
                self.acc(grads, bias, |g| {
                    for row in gy.chunks_exact(p) {
                        add_into(g, row);
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                self.acc(grads, x, |g| g.iter_mut().zip(gy).zip(xv).for_each(|((g, &d), &x)| *g += d * gelu_grad(x)));
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |g| {
                    for (row_g, row_h) in gy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
                        g.iter_mut().zip(row_g).zip(row_h).for_each(|((g, &dy), &h)| *g += dy * h);
                    }
                });
                self.acc(grads, *bias, |g| {
                    for row in gy.chunks_exact(d) {
                        add_into(g, row);
                    }
                });
                let dn = T::from_f64(d as f64);
                self.acc(grads, *x, |g| {
                    for (r, ((gx, dy), h)) in
                        g.chunks_exact_mut(d).zip(gy.chunks_exact(d)).zip(cache.xhat.chunks_exact(d)).enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = dy[j] * gv[j];
                            s1 += dh;
                            s2 += dh * h[j];
                        }
                        let is = cache.inv_std[r];
                        for j in 0..d {
                            let dh = dy[j] * gv[j];
                            gx[j] += is * (dh - s1 / dn - h[j] * s2 / dn);
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let (_, c) = self.nodes[i].value.dims2()?;
                self.acc(grads, x, |g| {
                    for ((gr, yr), dr) in g.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(gy.chunks_exact(c)) {
                        let s: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gr[j] += yr[j] * (dr[j] - s);
                        }
                    }
                });
            }
            &Op::Conv2d { input, kernel, geom } => {
                let (gin, gk) = geom.backward(self.value(input).data(), self.value(kernel).data(), gy);
                self.acc(grads, input, |g| add_into(g, &gin));
                self.acc(grads, kernel, |g| add_into(g, &gk));
            }
            &Op::AddChannelBias(x, bias) => {
                self.acc(grads, x, |g| add_into(g, gy));
                let s = self.shape(x);
                let (c, hw) = (s[1], s[2] * s[3]);
                self.acc(grads, bias, |g| {
                    for (p, plane) in gy.chunks_exact(hw).enumerate() {
                        g[p % c] += plane.iter().copied().sum::<T>();
                    }
                });
            }
            &Op::Patchify { x, patch } => {
                let &[b, c, h, w] = self.shape(x) else { unreachable!() };
                self.acc(grads, x, |g| for_each_patch_elem(b, c, h, w, patch, |dst, s| g[s] += gy[dst]));
            }
            &Op::AddPositions { x, table, n } => {
                self.acc(grads, x, |g| add_into(g, gy));
                let d = self.value(table).dims2()?.1;
                self.acc(grads, table, |g| {
                    for (r, row) in gy.chunks_exact(d).enumerate() {
                        let t = r % n;
                        add_into(&mut g[t * d..(t + 1) * d], row);
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let (_, c) = self.dims2(x)?;
                let (_, len) = self.nodes[i].value.dims2()?;
                self.acc(grads, x, |g| {
                    for (gr, dr) in g.chunks_exact_mut(c).zip(gy.chunks_exact(len)) {
                        add_into(&mut gr[start..start + len], dr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (_, total) = self.nodes[i].value.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.dims2(p)?;
                    self.acc(grads, p, |g| {
                        for (gr, dr) in g.chunks_exact_mut(c).zip(gy.chunks_exact(total)) {
                            add_into(gr, &dr[off..off + c]);
                        }
                    });
                    off += c;
                }
            }
            &Op::SliceRows { x, start } => {
                let (_, c) = self.dims2(x)?;
                self.acc(grads, x, |g| add_into(&mut g[start * c..start * c + gy.len()], gy));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |g| add_into(g, &gy[off..off + len]));
                    off += len;
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = self.nodes[i].value.data();
                let (_, c) = self.dims2(*x)?;
                let floor = T::from_f64(NORM_FLOOR);
                self.acc(grads, *x, |g| {
                    for (r, ((gr, yr), dr)) in
                        g.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(gy.chunks_exact(c)).enumerate()
                    {
                        let n = norms[r];
                        if n > floor {
                            let s: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                            for j in 0..c {
                                gr[j] += (dr[j] - yr[j] * s) / n;
                            }
                        } else {
                            for j in 0..c {
                                gr[j] += dr[j] / n;
                            }
                        }
                    }
                });
            }
            Op::CandidateAttention { q, k, v, cands, scale, probs } => {
                self.candidate_attention_backward(*q, *k, *v, cands, *scale, probs, gy, grads)?;
            }
            Op::MaskedMeanPool { x, inv_counts, tokens } => {
                let d = self.nodes[i].value.dims2()?.1;
                self.acc(grads, *x, |g| {
                    for (r, (gr, &w)) in g.chunks_exact_mut(d).zip(inv_counts).enumerate() {
                        let b = r / tokens;
                        gr.iter_mut().zip(&gy[b * d..(b + 1) * d]).for_each(|(g, &dy)| *g += dy * w);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs, weight } => {
                let c = self.dims2(*logits)?.1;
                let scale = gy[0] * *weight;
                self.acc(grads, *logits, |g| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            g[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            &Op::Sum(x) => self.acc(grads, x, |g| g.iter_mut().for_each(|g| *g += gy[0])),
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn candidate_attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        cands: &Candidates,
        scale: T,
        probs: &[Vec<T>],
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let (n, dh) = self.dims2(q)?;
        let dv = self.dims2(v)?.1;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![T::zero(); n * dh];
        let mut gk = vec![T::zero(); n * dh];
        let mut gv = vec![T::zero(); n * dv];
        for (i, c) in cands.iter().enumerate() {
            if c.is_empty() {
                continue;
            }
            let p = &probs[i];
            let go = &gy[i * dv..(i + 1) * dv];
            let dp: Vec<T> = c.iter().map(|&j| dot(go, &vd[j as usize * dv..(j as usize + 1) * dv])).collect();
            let s: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
            let qi = &qd[i * dh..(i + 1) * dh];
            for ((&j, &pj), &dpj) in c.iter().zip(p).zip(&dp) {
                let j = j as usize;
                gv[j * dv..(j + 1) * dv].iter_mut().zip(go).for_each(|(g, &o)| *g += pj * o);
                let ds = pj * (dpj - s) * scale;
                let kj = &kd[j * dh..(j + 1) * dh];
                gq[i * dh..(i + 1) * dh].iter_mut().zip(kj).for_each(|(g, &x)| *g += ds * x);
                gk[j * dh..(j + 1) * dh].iter_mut().zip(qi).for_each(|(g, &x)| *g += ds * x);
            }
        }
        self.acc(grads, q, |g| add_into(g, &gq));
        self.acc(grads, k, |g| add_into(g, &gk));
        self.acc(grads, v, |g| add_into(g, &gv));
        Ok(())
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T: Real = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Calls `f(dst_index, src_index)` for every element moved by patchify.
fn for_each_patch_elem(b: usize, c: usize, h: usize, w: usize, p: usize, mut f: impl FnMut(usize, usize)) {
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    for bi in 0..b {
        for gi in 0..gh {
            for gj in 0..gw {
                let row = (bi * gh + gi) * gw + gj;
                for ci in 0..c {
                    for pi in 0..p {
                        for pj in 0..p {
                            let col = (ci * p + pi) * p + pj;
                            let src = ((bi * c + ci) * h + gi * p + pi) * w + gj * p + pj;
                            f(row * feat + col, src);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    /// Checks the gradient of `build` (a scalar-valued graph of one input) against central differences.
    fn check(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let loss = build(&mut g, v);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(v).unwrap().data().to_vec();
        let numeric = numeric_grad(&x, |p| {
            let mut g = Graph::new();
            let v = g.constant(p.clone());
            let l = build(&mut g, v);
            g.value(l).data()[0]
        });
        assert_close(&analytic, &numeric);
    }

    #[test]
    fn sum_and_square_grads() {
        let x = RngStream::new(1).normal_tensor::<f64>(&[3, 4], 1.0);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let s = g.sum(v).unwrap();
        assert_eq!(g.backward(s).unwrap().get(v).unwrap(), &Tensor::ones(&[3, 4]));

        let mut g = Graph::new();
        let v = g.param(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq).unwrap();
        let grad = g.backward(s).unwrap().get(v).unwrap().clone();
        assert_eq!(grad, x.map(|a| 2.0 * a));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let v = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let x = RngStream::new(2).normal_tensor::<f64>(&[1, 4], 1.5);
        check(x, |g, v| g.cross_entropy(v, &[2], 1.0).unwrap());
        let x = RngStream::new(3).normal_tensor::<f64>(&[3, 4], 1.5);
        check(x, |g, v| g.cross_entropy(v, &[0, 3, 1], 1.0 / 3.0).unwrap());
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_classes() {
        for c in [2usize, 5, 10, 100] {
            let mut g = Graph::<f64>::new();
            let v = g.constant(Tensor::zeros(&[1, c]));
            let l = g.cross_entropy(v, &[0], 1.0).unwrap();
            assert_eq!(g.value(l).data()[0], (c as f64).ln());
        }
    }

    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let w = RngStream::new(seed).normal_tensor::<f64>(g.shape(y), 1.0);
        let w = g.constant(w);
        let p = g.mul(y, w).unwrap();
        g.sum(p).unwrap()
    }

    #[test]
    fn matmul_grads() {
        let mut rng = RngStream::new(4);
        let b = rng.normal_tensor::<f64>(&[4, 3], 1.0);
        let a = rng.normal_tensor::<f64>(&[2, 4], 1.0);
        let bb = b.clone();
        check(a.clone(), move |g, v| {
            let c = g.constant(bb.clone());
            let y = g.matmul(v, c).unwrap();
            weighted_sum(g, y, 9)
        });
        check(b, move |g, v| {
            let c = g.constant(a.clone());
            let y = g.matmul(c, v).unwrap();
            weighted_sum(g, y, 9)
        });
        let k = rng.normal_tensor::<f64>(&[5, 4], 1.0);
        let q = rng.normal_tensor::<f64>(&[3, 4], 1.0);
        let qq = q.clone();
        check(k, move |g, v| {
            let c = g.constant(qq.clone());
            let y = g.matmul_t(c, v).unwrap();
            weighted_sum(g, y, 10)
        });
    }

    #[test]
    fn elementwise_and_norm_grads() {
        let mut rng = RngStream::new(5);
        let x = rng.normal_tensor::<f64>(&[3, 6], 1.0);
        check(x.clone(), |g, v| {
            let y = g.gelu(v).unwrap();
            weighted_sum(g, y, 1)
        });
        check(x.clone(), |g, v| {
            let gain = g.constant(RngStream::new(7).normal_tensor(&[6], 1.0));
            let bias = g.constant(Tensor::zeros(&[6]));
            let y = g.layer_norm(v, gain, bias, 1e-5).unwrap();
            weighted_sum(g, y, 2)
        });
        check(x.clone(), |g, v| {
            let y = g.softmax_rows(v, Some(&[true, false, true, true, false, true])).unwrap();
            weighted_sum(g, y, 3)
        });
        check(x.clone(), |g, v| {
            let y = g.normalize_rows(v).unwrap();
            weighted_sum(g, y, 4)
        });
        check(x, |g, v| {
            let a = g.slice_cols(v, 1, 3).unwrap();
            let b = g.slice_rows(v, 1, 2).unwrap();
            let bt = g.slice_cols(b, 0, 3).unwrap();
            let pad = g.pad_rows(bt, 3).unwrap();
            let c = g.concat_cols(&[a, pad]).unwrap();
            let r = g.concat_rows(&[c, c]).unwrap();
            weighted_sum(g, r, 5)
        });
    }

    #[test]
    fn conv_and_patch_grads() {
        let mut rng = RngStream::new(6);
        let img = rng.normal_tensor::<f64>(&[2, 2, 4, 4], 1.0);
        let k = rng.normal_tensor::<f64>(&[3, 2, 3, 3], 0.5);
        let kk = k.clone();
        check(img.clone(), move |g, v| {
            let c = g.constant(kk.clone());
            let y = g.conv2d(v, c, 1, 1).unwrap();
            let p = g.patchify(y, 2).unwrap();
            weighted_sum(g, p, 6)
        });
        check(k, move |g, v| {
            let c = g.constant(img.clone());
            let y = g.conv2d(c, v, 2, 1).unwrap();
            weighted_sum(g, y, 7)
        });
        let bias = rng.normal_tensor::<f64>(&[3], 1.0);
        check(bias, |g, v| {
            let x = g.constant(RngStream::new(1).normal_tensor(&[2, 3, 2, 2], 1.0));
            let y = g.add_channel_bias(x, v).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum(y).unwrap()
        });
    }

    #[test]
    fn candidate_attention_grads() {
        let mut rng = RngStream::new(8);
        let cands: Candidates = vec![vec![0, 2], vec![1], vec![0, 1, 2, 3], vec![], vec![3, 4]];
        let q = rng.normal_tensor::<f64>(&[5, 3], 1.0);
        let k = rng.normal_tensor::<f64>(&[5, 3], 1.0);
        let v = rng.normal_tensor::<f64>(&[5, 2], 1.0);
        for which in 0..3 {
            let (q, k, v, c) = (q.clone(), k.clone(), v.clone(), cands.clone());
            let x = [&q, &k, &v][which].clone();
            check(x, move |g, var| {
                let mut ins = [g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone())];
                ins[which] = var;
                let y = g.candidate_attention(ins[0], ins[1], ins[2], c.clone(), 0.7).unwrap();
                weighted_sum(g, y, 11)
            });
        }
    }

    #[test]
    fn pool_and_positions_grads() {
        let mut rng = RngStream::new(9);
        let x = rng.normal_tensor::<f64>(&[6, 2], 1.0);
        check(x.clone(), |g, v| {
            let y = g.masked_mean_pool(v, &[true, false, true, true, true, true], 3).unwrap();
            weighted_sum(g, y, 12)
        });
        let table = rng.normal_tensor::<f64>(&[4, 2], 1.0);
        check(table, move |g, v| {
            let c = g.constant(x.clone());
            let y = g.add_positions(c, v, 3).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum(y).unwrap()
        });
    }

    #[test]
    fn all_masked_pool_is_degenerate() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros(&[4, 2]));
        assert_eq!(g.masked_mean_pool(v, &[true, true, false, false], 2).unwrap_err(), Error::DegenerateRow { row: 1 });
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[2, 2]));
        let b = g.param(Tensor::ones(&[2, 2]));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
