#![allow(clippy::needless_range_loop)]

mod common;

use common::{max_abs, naive_matmul};
use visreformer_core::attention::{AttentionConfig, ScoreCounter, SeqLayout};
use visreformer_core::graph::{Graph, Var};
use visreformer_core::params::{Bound, ParamMap};
use visreformer_core::revblocks::{
    activation_memory_estimate, rev_backward, rev_forward, rev_forward_graph, rev_inverse, stack_backward, stack_forward,
    stack_inverse, AttentionKind, AttentionSublayer, ChunkedFFNConfig, FeedForwardSublayer, ReversibleBlock, Sublayer,
};
use visreformer_core::{Error, Real, Result, RngStream, Tensor};

/// `x -> x W` with `W` read from the parameter map.
struct Linear(String);

impl<T: Real> Sublayer<T> for Linear {
    fn param_names(&self) -> Vec<String> {
        vec![self.0.clone()]
    }
    fn apply(&self, g: &mut Graph<T>, p: &Bound, x: Var, _: &SeqLayout, _: &mut ScoreCounter) -> Result<Var> {
        g.matmul(x, p.get(&self.0)?)
    }
}

struct Zero;

impl<T: Real> Sublayer<T> for Zero {
    fn param_names(&self) -> Vec<String> {
        vec![]
    }
    fn apply(&self, g: &mut Graph<T>, _: &Bound, x: Var, _: &SeqLayout, _: &mut ScoreCounter) -> Result<Var> {
        g.scale(x, T::zero())
    }
}

/// Claims fresh randomness on every call.
struct Unreplayable;

impl<T: Real> Sublayer<T> for Unreplayable {
    fn param_names(&self) -> Vec<String> {
        vec![]
    }
    fn apply(&self, g: &mut Graph<T>, _: &Bound, x: Var, _: &SeqLayout, _: &mut ScoreCounter) -> Result<Var> {
        g.scale(x, T::one())
    }
    fn replayable(&self) -> bool {
        false
    }
}

fn block_params<T: Real>(prefix: &str, d: usize, hidden: usize, shared: bool, rng: &mut RngStream) -> ParamMap<T> {
    let mut p = ParamMap::new();
    let mut put = |name: &str, t: Tensor<T>| {
        p.insert(format!("{prefix}.{name}"), t);
    };
    put("attn_norm.gain", Tensor::from_fn(&[d], |_| T::from_f64(1.0 + 0.1 * rng.normal())));
    put("attn_norm.bias", rng.normal_tensor(&[d], 0.1));
    put("attn.wq", rng.normal_tensor(&[d, d], 0.3));
    if !shared {
        put("attn.wk", rng.normal_tensor(&[d, d], 0.3));
    }
    put("attn.wv", rng.normal_tensor(&[d, d], 0.3));
    put("attn.wo", rng.normal_tensor(&[d, d], 0.3));
    put("attn.bo", rng.normal_tensor(&[d], 0.1));
    put("ffn_norm.gain", Tensor::from_fn(&[d], |_| T::from_f64(1.0 + 0.1 * rng.normal())));
    put("ffn_norm.bias", rng.normal_tensor(&[d], 0.1));
    put("ffn.w1", rng.normal_tensor(&[d, hidden], 0.3));
    put("ffn.b1", rng.normal_tensor(&[hidden], 0.1));
    put("ffn.w2", rng.normal_tensor(&[hidden, d], 0.3));
    put("ffn.b2", rng.normal_tensor(&[d], 0.1));
    p
}

fn lsh_stack<T: Real>(depth: usize, d: usize, rng: &mut RngStream) -> (Vec<ReversibleBlock<T>>, ParamMap<T>) {
    let attn = AttentionConfig { heads: 2, model_dim: d, bucket_size: 4, n_rounds: 2, lookback: 1, shared_qk: true };
    let mut params = ParamMap::new();
    let mut blocks = Vec::new();
    for l in 0..depth {
        let prefix = format!("blocks.{l}");
        params.extend(block_params::<T>(&prefix, d, 2 * d, true, rng));
        let f = AttentionSublayer { prefix: prefix.clone(), cfg: attn.clone(), kind: AttentionKind::Lsh(77 + l as u64) };
        let g = FeedForwardSublayer { prefix, cfg: ChunkedFFNConfig { hidden_dim: 2 * d, chunk_len: 5 } };
        blocks.push(ReversibleBlock::new(f, g));
    }
    (blocks, params)
}

#[test]
fn zero_branches_are_identity() {
    let block = ReversibleBlock::<f64>::new(Zero, Zero);
    let mut rng = RngStream::new(1);
    let x1: Tensor = rng.normal_tensor(&[6, 4], 1.0);
    let x2: Tensor = rng.normal_tensor(&[6, 4], 1.0);
    let layout = SeqLayout::dense(2, 3);
    let (y1, y2) = rev_forward(&block, &ParamMap::new(), &x1, &x2, &layout, &mut ScoreCounter::new()).unwrap();
    assert_eq!((&y1, &y2), (&x1, &x2));
    let (a, b) = rev_inverse(&block, &ParamMap::new(), &y1, &y2, &layout).unwrap();
    assert_eq!((a, b), (x1, x2));
}

#[test]
fn zero_g_leaves_second_stream() {
    let block = ReversibleBlock::<f64>::new(Linear("wf".into()), Zero);
    let mut rng = RngStream::new(2);
    let wf: Tensor = rng.normal_tensor(&[3, 3], 1.0);
    let params: ParamMap<f64> = [("wf".to_string(), wf.clone())].into_iter().collect();
    let x1: Tensor = rng.normal_tensor(&[4, 3], 1.0);
    let x2: Tensor = rng.normal_tensor(&[4, 3], 1.0);
    let (y1, y2) = rev_forward(&block, &params, &x1, &x2, &SeqLayout::dense(1, 4), &mut ScoreCounter::new()).unwrap();
    assert_eq!(y2, x2);
    let fx = naive_matmul(x2.data(), wf.data(), 4, 3, 3);
    let want: Vec<f64> = x1.data().iter().zip(&fx).map(|(a, b)| a + b).collect();
    assert!(max_abs(y1.data(), &want) < 1e-14);
}

/// Solves `a x = b` for square `a` by Gauss-Jordan elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in 0..n {
                    a[r][c] -= f * a[col][c];
                }
                for c in 0..b[0].len() {
                    b[r][c] -= f * b[col][c];
                }
            }
        }
    }
    (0..n).map(|r| b[r].iter().map(|v| v / a[r][r]).collect()).collect()
}

#[test]
fn linear_block_inverse_matches_closed_form() {
    // With F = x Wf and G = x Wg, [y1 y2] = [x1 x2] M where
    // M = [[I, Wg], [Wf, I + Wf Wg]], so [x1 x2] = [y1 y2] M^-1.
    let w = 3;
    let mut rng = RngStream::new(3);
    let wf: Tensor = rng.normal_tensor(&[w, w], 0.7);
    let wg: Tensor = rng.normal_tensor(&[w, w], 0.7);
    let params: ParamMap<f64> = [("wf".to_string(), wf.clone()), ("wg".to_string(), wg.clone())].into_iter().collect();
    let block = ReversibleBlock::<f64>::new(Linear("wf".into()), Linear("wg".into()));
    let y1: Tensor = rng.normal_tensor(&[5, w], 1.0);
    let y2: Tensor = rng.normal_tensor(&[5, w], 1.0);
    let (x1, x2) = rev_inverse(&block, &params, &y1, &y2, &SeqLayout::dense(1, 5)).unwrap();

    let fg = naive_matmul(wf.data(), wg.data(), w, w, w);
    let m: Vec<Vec<f64>> = (0..2 * w)
        .map(|r| {
            (0..2 * w)
                .map(|c| {
                    let eye = if r % w == c % w { 1.0 } else { 0.0 };
                    match (r < w, c < w) {
                        (true, true) => eye,
                        (true, false) => wg.data()[r * w + c - w],
                        (false, true) => wf.data()[(r - w) * w + c],
                        (false, false) => eye + fg[(r - w) * w + c - w],
                    }
                })
                .collect()
        })
        .collect();
    // Rows of Y = X M, so X^T = M^T \ Y^T.
    let mt: Vec<Vec<f64>> = (0..2 * w).map(|r| (0..2 * w).map(|c| m[c][r]).collect()).collect();
    let yt: Vec<Vec<f64>> = (0..2 * w)
        .map(|c| (0..5).map(|i| if c < w { y1.data()[i * w + c] } else { y2.data()[i * w + c - w] }).collect())
        .collect();
    let xt = solve(mt, yt);
    for i in 0..5 {
        for c in 0..w {
            assert!((x1.data()[i * w + c] - xt[c][i]).abs() < 1e-12);
            assert!((x2.data()[i * w + c] - xt[c + w][i]).abs() < 1e-12);
        }
    }
}

#[test]
fn random_lsh_block_round_trips() {
    let mut rng = RngStream::new(4);
    let (blocks, params) = lsh_stack::<f64>(1, 8, &mut rng);
    let layout = SeqLayout::dense(2, 10);
    let x1: Tensor = rng.normal_tensor(&[20, 8], 1.0);
    let x2: Tensor = rng.normal_tensor(&[20, 8], 1.0);
    let mut counter = ScoreCounter::new();
    let (y1, y2) = rev_forward(&blocks[0], &params, &x1, &x2, &layout, &mut counter).unwrap();
    assert!(counter.scores_evaluated > 0);
    let (a, b) = rev_inverse(&blocks[0], &params, &y1, &y2, &layout).unwrap();
    assert!(a.max_abs_diff(&x1).unwrap() < 1e-10 && b.max_abs_diff(&x2).unwrap() < 1e-10);
}

#[test]
fn eight_layer_stack_round_trips_in_both_precisions() {
    let layout = SeqLayout::dense(2, 16);
    let mut rng = RngStream::new(5);
    let (blocks, params) = lsh_stack::<f64>(8, 8, &mut rng);
    let x1: Tensor = rng.normal_tensor(&[32, 8], 1.0);
    let x2: Tensor = rng.normal_tensor(&[32, 8], 1.0);
    let (y1, y2) = stack_forward(&blocks, &params, &x1, &x2, &layout, &mut ScoreCounter::new()).unwrap();
    let (a, b) = stack_inverse(&blocks, &params, &y1, &y2, &layout).unwrap();
    assert!(a.max_abs_diff(&x1).unwrap().max(b.max_abs_diff(&x2).unwrap()) < 1e-8);

    let mut rng = RngStream::new(5);
    let (blocks, params) = lsh_stack::<f32>(8, 8, &mut rng);
    let x1: Tensor<f32> = rng.normal_tensor(&[32, 8], 1.0);
    let x2: Tensor<f32> = rng.normal_tensor(&[32, 8], 1.0);
    let (y1, y2) = stack_forward(&blocks, &params, &x1, &x2, &layout, &mut ScoreCounter::new()).unwrap();
    let (a, b) = stack_inverse(&blocks, &params, &y1, &y2, &layout).unwrap();
    assert!(a.max_abs_diff(&x1).unwrap().max(b.max_abs_diff(&x2).unwrap()) < 1e-4);
}

#[test]
fn unreplayable_sublayer_is_a_contract_error() {
    let block = ReversibleBlock::<f64>::new(Unreplayable, Zero);
    let y: Tensor = Tensor::zeros(&[2, 2]);
    let r = rev_inverse(&block, &ParamMap::new(), &y, &y, &SeqLayout::dense(1, 2));
    assert!(matches!(r, Err(Error::Contract(_))));
    let r = rev_backward(&block, &ParamMap::new(), &y, &y, &y, &y, &SeqLayout::dense(1, 2));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn mismatched_streams_are_rejected() {
    let block = ReversibleBlock::<f64>::new(Zero, Zero);
    let a: Tensor = Tensor::zeros(&[2, 3]);
    let b: Tensor = Tensor::zeros(&[2, 4]);
    let r = rev_forward(&block, &ParamMap::new(), &a, &b, &SeqLayout::dense(1, 2), &mut ScoreCounter::new());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn reconstructed_gradients_match_stored_tape() {
    let layout = SeqLayout::dense(2, 9);
    let mut rng = RngStream::new(6);
    let (blocks, params) = lsh_stack::<f64>(2, 8, &mut rng);
    let x1: Tensor = rng.normal_tensor(&[18, 8], 1.0);
    let x2: Tensor = rng.normal_tensor(&[18, 8], 1.0);
    let r1: Tensor = rng.normal_tensor(&[18, 8], 1.0);
    let r2: Tensor = rng.normal_tensor(&[18, 8], 1.0);

    // Stored: the whole stack on one tape, seeded with (r1, r2) on the outputs.
    let mut g = Graph::new();
    let names: Vec<String> = params.keys().cloned().collect();
    let bound = Bound::bind(&mut g, &params, names.iter().map(String::as_str), true).unwrap();
    let v1 = g.leaf(x1.clone().with_requires_grad(true));
    let v2 = g.leaf(x2.clone().with_requires_grad(true));
    let (mut a, mut b) = (v1, v2);
    for block in &blocks {
        (a, b) = rev_forward_graph(&mut g, block, &bound, a, b, &layout, &mut ScoreCounter::new()).unwrap();
    }
    let joined = g.concat_cols(&[a, b]).unwrap();
    let seed = Tensor::concat_cols(&[&r1, &r2]).unwrap();
    let back = g.backward_with(joined, seed).unwrap();
    let stored = bound.collect(&g, &back);

    let (y1, y2) = stack_forward(&blocks, &params, &x1, &x2, &layout, &mut ScoreCounter::new()).unwrap();
    let rec = stack_backward(&blocks, &params, &y1, &y2, &r1, &r2, &layout).unwrap();
    assert!(rec.x1.max_abs_diff(&x1).unwrap() < 1e-10);
    assert!(rec.dx1.max_abs_diff(back.get(v1).unwrap()).unwrap() < 1e-10);
    assert!(rec.dx2.max_abs_diff(back.get(v2).unwrap()).unwrap() < 1e-10);
    assert_eq!(stored.len(), rec.grads.len());
    for (name, s) in &stored {
        let r = &rec.grads[name];
        for (a, b) in s.data().iter().zip(r.data()) {
            assert!((a - b).abs() / a.abs().max(b.abs()).max(1e-6) < 1e-6, "{name}");
        }
    }
}

#[test]
fn memory_ratio_is_two_over_depth() {
    for depth in [1, 8, 10, 12] {
        for (n, d) in [(256, 384), (784, 384), (7, 3)] {
            let ratio = activation_memory_estimate(depth, n, d, true) / activation_memory_estimate(depth, n, d, false);
            assert_eq!(ratio, 2.0 / depth as f64);
        }
    }
}
