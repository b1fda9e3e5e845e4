//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use visreformer_core::Tensor;

/// `a [m, k] * b [k, n]` with plain loops.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / norm).collect()
}

/// Single-head attention of query `i` over the key indices in `keys`.
pub fn attend(q: &[f64], k: &[Vec<f64>], v: &[Vec<f64>], keys: &[usize], scale: f64) -> Vec<f64> {
    let scores: Vec<f64> = keys.iter().map(|&j| q.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; v[0].len()];
    for (wi, &j) in w.iter().zip(keys) {
        for (o, x) in out.iter_mut().zip(&v[j]) {
            *o += wi / z * x;
        }
    }
    out
}

/// Plain-loop multi-head attention over one item `x [n, D]`.
///
/// `wk = None` means shared-QK (keys are normalized queries). `keys_of(h, i)`
/// lists the keys query `i` of head `h` may see.
#[allow(clippy::too_many_arguments)]
pub fn reference_attention(
    x: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    wq: &[f64],
    wk: Option<&[f64]>,
    wv: &[f64],
    wo: &[f64],
    bo: &[f64],
    keys_of: &dyn Fn(usize, usize) -> Vec<usize>,
) -> Vec<f64> {
    let dh = d / heads;
    let q = naive_matmul(x, wq, n, d, d);
    let k = wk.map(|w| naive_matmul(x, w, n, d, d));
    let v = naive_matmul(x, wv, n, d, d);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = vec![0.0; n * d];
    for h in 0..heads {
        let slice = |m: &[f64], i: usize| m[i * d + h * dh..i * d + (h + 1) * dh].to_vec();
        let qs: Vec<Vec<f64>> = (0..n).map(|i| slice(&q, i)).collect();
        let ks: Vec<Vec<f64>> = match &k {
            Some(k) => (0..n).map(|i| slice(k, i)).collect(),
            None => qs.iter().map(|r| normalize(r)).collect(),
        };
        let vs: Vec<Vec<f64>> = (0..n).map(|i| slice(&v, i)).collect();
        for i in 0..n {
            let keys = keys_of(h, i);
            if keys.is_empty() {
                continue;
            }
            let o = attend(&qs[i], &ks, &vs, &keys, scale);
            concat[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&o);
        }
    }
    let mut out = naive_matmul(&concat, wo, n, d, d);
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] += bo[j];
        }
    }
    out
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error with a floor so that tiny gradients are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` with respect to entry `i` of `t`.
pub fn central_difference(t: &Tensor<f64>, i: usize, h: f64, f: &mut dyn FnMut(&Tensor<f64>) -> f64) -> f64 {
    let mut plus = t.clone();
    plus.data_mut()[i] += h;
    let mut minus = t.clone();
    minus.data_mut()[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// A 16-token model small enough for finite differences.
pub fn tiny_config(variant: visreformer_core::model::Variant, depth: usize) -> visreformer_core::model::ModelConfig {
    use visreformer_core::attention::AttentionConfig;
    use visreformer_core::model::{ModelConfig, Variant};
    use visreformer_core::revblocks::ChunkedFFNConfig;
    use visreformer_core::tokenizer::PatchConfig;
    let d = 8;
    ModelConfig {
        variant,
        depth,
        patch: PatchConfig {
            image_height: 8,
            image_width: 8,
            channels: 3,
            patch_size: 2,
            embed_dim: d,
            stem_channels: 4,
            stem_kernel: 3,
        },
        attn: AttentionConfig {
            heads: 2,
            model_dim: d,
            bucket_size: 4,
            n_rounds: 2,
            lookback: 1,
            shared_qk: variant == Variant::Lsh,
        },
        ffn: ChunkedFFNConfig { hidden_dim: 16, chunk_len: 5 },
        n_classes: 3,
        preset: None,
    }
}

/// Adds `N(0, std^2)` noise to every parameter so gradients are not dominated by
/// the small initialization.
pub fn jitter<T: visreformer_core::Real>(model: &mut visreformer_core::model::VisionModel<T>, seed: u64, std: f64) {
    let mut rng = visreformer_core::RngStream::new(seed);
    for t in model.params.values_mut() {
        for v in t.data_mut() {
            *v += T::from_f64(std * rng.normal());
        }
    }
}

/// Accuracy, macro precision, macro recall and macro F1 from raw label and
/// prediction lists, counting pairs directly.
pub fn metric_oracle(labels: &[usize], predictions: &[usize], n_classes: usize) -> [f64; 4] {
    let pairs: Vec<(usize, usize)> = labels.iter().copied().zip(predictions.iter().copied()).collect();
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    let (mut ps, mut rs, mut fs) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..n_classes {
        let actual = pairs.iter().filter(|(t, _)| *t == c).count();
        if actual == 0 {
            continue;
        }
        let hits = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
        let called = pairs.iter().filter(|(_, p)| *p == c).count();
        let p = if called == 0 { 0.0 } else { hits / called as f64 };
        let r = hits / actual as f64;
        ps.push(p);
        rs.push(r);
        fs.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    [correct as f64 / pairs.len() as f64, mean(&ps), mean(&rs), mean(&fs)]
}
