//! Invariant suites run by `verify`, each entry reporting pass or fail.

use std::collections::BTreeSet;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use visreformer_core::attention::{candidate_sets, dense_attention, lsh_attention, AttentionConfig, AttentionParams, ScoreCounter, SeqLayout};
use visreformer_core::model::{GradMode, ModelConfig, Variant, VisionModel};
use visreformer_core::revblocks::{activation_memory_estimate, chunked_ffn, stack_forward, stack_inverse, ChunkedFFNConfig, FfnParams};
use visreformer_core::tensor::stable_sort_with_permutation;
use visreformer_core::tokenizer::{PatchConfig, TokenSequence};
use visreformer_core::{Real, RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Attention,
    Revblocks,
    Gradients,
    All,
}

impl Scope {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attention" => Some(Scope::Attention),
            "revblocks" => Some(Scope::Revblocks),
            "gradients" => Some(Scope::Gradients),
            "all" => Some(Scope::All),
            _ => None,
        }
    }

    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    /// `scope.invariant`.
    pub name: String,
    pub passed: bool,
    /// Worst observed error or count, when the invariant is numeric.
    pub measured: Option<f64>,
    pub tolerance: Option<f64>,
    pub detail: String,
}

impl Check {
    fn bound(name: &str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed: measured < tolerance, measured: Some(measured), tolerance: Some(tolerance), detail: detail.into() }
    }

    fn holds(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, measured: None, tolerance: None, detail: detail.into() }
    }

    fn errored(name: &str, err: anyhow::Error) -> Self {
        Self::holds(name, false, format!("error: {err:#}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub scope: Scope,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<String> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect()
    }
}

type Suite = (&'static str, fn() -> Result<Check>);

const ATTENTION: [Suite; 7] = [
    ("attention.degeneracy", attention_degeneracy),
    ("attention.saturation", attention_saturation),
    ("attention.monotonicity", attention_monotonicity),
    ("attention.counter_exactness", attention_counters),
    ("attention.permutation_safety", attention_permutation),
    ("attention.masked_tokens", attention_masking),
    ("attention.determinism", attention_determinism),
];

const REVBLOCKS: [Suite; 5] = [
    ("revblocks.round_trip_f64", round_trip_f64),
    ("revblocks.round_trip_f32", round_trip_f32),
    ("revblocks.chunked_ffn_invariance", ffn_chunk_invariance),
    ("revblocks.memory_ratio", memory_ratio),
    ("revblocks.reconstructed_gradients", reconstructed_gradients),
];

const GRADIENTS: [Suite; 2] = [("gradients.dense_model", dense_gradients), ("gradients.lsh_model", lsh_gradients)];

/// Every invariant name, in report order, for `scope`.
pub fn invariant_names(scope: Scope) -> Vec<&'static str> {
    suites(scope).into_iter().map(|(n, _)| n).collect()
}

fn suites(scope: Scope) -> Vec<Suite> {
    let mut out = Vec::new();
    if scope.includes(Scope::Attention) {
        out.extend(ATTENTION);
    }
    if scope.includes(Scope::Revblocks) {
        out.extend(REVBLOCKS);
    }
    if scope.includes(Scope::Gradients) {
        out.extend(GRADIENTS);
    }
    out
}

/// Runs every invariant in `scope`. Errors inside a check count as failures
/// of that check rather than aborting the run.
pub fn run(scope: Scope) -> VerifyReport {
    let checks: Vec<Check> = suites(scope)
        .into_iter()
        .map(|(name, f)| {
            let mut c = f().unwrap_or_else(|e| Check::errored(name, e));
            c.name = name.into();
            c
        })
        .collect();
    VerifyReport { scope, passed: checks.iter().all(|c| c.passed), checks }
}

/// Process-wide faults for exercising the harness itself.
#[cfg(feature = "fault-injection")]
pub mod faults {
    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum Fault {
        /// Reversible inverses return a slightly wrong first stream.
        BrokenInverse,
    }

    pub fn parse(s: &str) -> Option<Fault> {
        match s {
            "broken-inverse" => Some(Fault::BrokenInverse),
            _ => None,
        }
    }

    pub fn inject(f: Fault) {
        match f {
            Fault::BrokenInverse => visreformer_core::fault::set_broken_inverse(true),
        }
    }
}

fn attn(heads: usize, d: usize, bucket: usize, rounds: usize, lookback: usize) -> AttentionConfig {
    AttentionConfig { heads, model_dim: d, bucket_size: bucket, n_rounds: rounds, lookback, shared_qk: true }
}

fn case(seed: u64, n: usize, cfg: &AttentionConfig) -> (TokenSequence, AttentionParams) {
    let mut rng = RngStream::new(seed);
    let x = rng.normal_tensor(&[1, n, cfg.model_dim], 1.0);
    let params = AttentionParams::random(&AttentionConfig { shared_qk: false, ..cfg.clone() }, &mut rng, 0.5).shared();
    (TokenSequence::unmasked(x).expect("3-d tokens"), params)
}

fn pair_sets(sets: &[Vec<u32>]) -> BTreeSet<(usize, u32)> {
    sets.iter().enumerate().flat_map(|(q, s)| s.iter().map(move |&k| (q, k))).collect()
}

fn attention_degeneracy() -> Result<Check> {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let cfg = attn(2, 8, 16, 2, 1);
        let (seq, p) = case(1000 + seed, 16, &cfg);
        let lsh = lsh_attention(&seq, &cfg, &p, seed, &mut ScoreCounter::new())?;
        let dense = dense_attention(&seq, &cfg, &p, &mut ScoreCounter::new())?;
        worst = worst.max(lsh.tokens.max_abs_diff(&dense.tokens)?);
    }
    Ok(Check::bound("", worst, 1e-10, "20 seeds, n=16, one chunk, max abs error vs dense shared-QK"))
}

fn attention_saturation() -> Result<Check> {
    let (n, d, seed) = (32, 8, 5);
    let (seq, p) = case(77, n, &attn(1, d, 4, 1, 1));
    for rounds in 1..=512 {
        let cfg = attn(1, d, 4, rounds, 1);
        let total: usize = candidate_sets(&seq, &cfg, &p, seed)?[0][0].iter().map(Vec::len).sum();
        if total == n * n {
            let lsh = lsh_attention(&seq, &cfg, &p, seed, &mut ScoreCounter::new())?;
            let dense = dense_attention(&seq, &cfg, &p, &mut ScoreCounter::new())?;
            let err = lsh.tokens.max_abs_diff(&dense.tokens)?;
            return Ok(Check::bound("", err, 1e-10, format!("candidate sets saturated after {rounds} rounds")));
        }
    }
    Ok(Check::holds("", false, "candidate sets did not saturate within 512 rounds"))
}

fn attention_monotonicity() -> Result<Check> {
    let (seq, p) = case(3, 64, &attn(2, 8, 4, 1, 0));
    let mut violations = 0;
    for rounds in 1..4 {
        for lookback in 0..3 {
            let base = candidate_sets(&seq, &attn(2, 8, 4, rounds, lookback), &p, 9)?;
            let more_rounds = candidate_sets(&seq, &attn(2, 8, 4, rounds + 1, lookback), &p, 9)?;
            let more_lookback = candidate_sets(&seq, &attn(2, 8, 4, rounds, lookback + 1), &p, 9)?;
            for h in 0..2 {
                let b = pair_sets(&base[0][h]);
                violations += usize::from(!b.is_subset(&pair_sets(&more_rounds[0][h])));
                violations += usize::from(!b.is_subset(&pair_sets(&more_lookback[0][h])));
            }
        }
    }
    Ok(Check::holds("", violations == 0, format!("{violations} candidate-set comparisons lost a pair")))
}

fn attention_counters() -> Result<Check> {
    let cfg = attn(3, 12, 8, 2, 1);
    let (seq, p) = case(4, 100, &cfg);
    let dense_cfg = AttentionConfig { shared_qk: true, ..cfg.clone() };
    let mut c = ScoreCounter::new();
    dense_attention(&seq, &dense_cfg, &p, &mut c)?;
    let dense_ok = c.scores_evaluated == 100 * 100 * 3;
    let mut c = ScoreCounter::new();
    lsh_attention(&seq, &cfg, &p, 2, &mut c)?;
    let sets = candidate_sets(&seq, &cfg, &p, 2)?;
    let expected: usize = sets[0].iter().flat_map(|h| h.iter().map(Vec::len)).sum();
    let lsh_ok = c.scores_evaluated == expected as u64 && c.scores_evaluated <= cfg.lsh_score_bound(100) * 3;
    Ok(Check::holds("", dense_ok && lsh_ok, format!("dense {dense_ok}, lsh counter {} vs candidate total {expected}", c.scores_evaluated)))
}

fn attention_permutation() -> Result<Check> {
    let mut rng = RngStream::new(6);
    let mut ok = true;
    for len in [0usize, 1, 7, 64, 257] {
        let keys: Vec<usize> = (0..len).map(|_| rng.below(9)).collect();
        let perm = stable_sort_with_permutation(&keys);
        let idx: Vec<usize> = (0..len).collect();
        ok &= perm.unapply(&perm.apply(&idx)) == idx;
        ok &= perm.sorted.windows(2).all(|w| w[0] <= w[1]);
    }
    Ok(Check::holds("", ok, "unsorting the sorted index list restores it exactly"))
}

fn attention_masking() -> Result<Check> {
    let cfg = attn(2, 8, 4, 2, 1);
    let (seq, p) = case(8, 20, &cfg);
    let mask: Vec<bool> = (0..20).map(|i| i % 5 != 3).collect();
    let masked = TokenSequence::new(seq.tokens.clone(), mask.clone())?;
    let sets = candidate_sets(&masked, &cfg, &p, 4)?;
    let leaked = sets[0].iter().flatten().flatten().filter(|&&k| !mask[k as usize]).count();
    let mut altered = seq.tokens.clone();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            altered.data_mut()[i * 8..(i + 1) * 8].iter_mut().for_each(|v| *v += 3.0);
        }
    }
    let altered = TokenSequence::new(altered, mask.clone())?;
    let a = lsh_attention(&masked, &cfg, &p, 4, &mut ScoreCounter::new())?;
    let b = lsh_attention(&altered, &cfg, &p, 4, &mut ScoreCounter::new())?;
    let mut drift = 0.0f64;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for j in 0..8 {
                drift = drift.max((a.tokens.data()[i * 8 + j] - b.tokens.data()[i * 8 + j]).abs());
            }
        }
    }
    Ok(Check::holds("", leaked == 0 && drift == 0.0, format!("{leaked} masked candidates; unmasked output drift {drift:e}")))
}

fn attention_determinism() -> Result<Check> {
    let cfg = attn(2, 8, 4, 2, 1);
    let (seq, p) = case(10, 40, &cfg);
    let a = lsh_attention(&seq, &cfg, &p, 12, &mut ScoreCounter::new())?;
    let b = lsh_attention(&seq, &cfg, &p, 12, &mut ScoreCounter::new())?;
    Ok(Check::holds("", a == b, "same seed and inputs give bit-identical outputs"))
}

/// A 16-token model small enough for finite differences.
pub fn tiny_model_config(variant: Variant, depth: usize) -> ModelConfig {
    let d = 8;
    ModelConfig {
        variant,
        depth,
        patch: PatchConfig { image_height: 8, image_width: 8, channels: 3, patch_size: 2, embed_dim: d, stem_channels: 4, stem_kernel: 3 },
        attn: AttentionConfig { heads: 2, model_dim: d, bucket_size: 4, n_rounds: 2, lookback: 1, shared_qk: variant == Variant::Lsh },
        ffn: ChunkedFFNConfig { hidden_dim: 16, chunk_len: 5 },
        n_classes: 3,
        preset: None,
    }
}

fn jittered<T: Real>(cfg: ModelConfig, seed: u64, std: f64) -> Result<VisionModel<T>> {
    let mut m = VisionModel::<T>::build(cfg, seed)?;
    let mut rng = RngStream::new(seed ^ 0x9e37);
    for t in m.params.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += T::from_f64(std * rng.normal()));
    }
    Ok(m)
}

/// Worst round-trip error over stacks of the preset depths.
fn round_trip<T: Real>() -> Result<f64> {
    let mut worst = 0.0f64;
    for depth in [12, 10, 8] {
        let m = jittered::<T>(tiny_model_config(Variant::Lsh, depth), depth as u64, 0.1)?;
        let blocks = m.reversible_blocks()?;
        let layout = SeqLayout::dense(2, 16);
        let mut rng = RngStream::new(depth as u64);
        let x1: Tensor<T> = rng.normal_tensor(&[32, 8], 1.0);
        let x2: Tensor<T> = rng.normal_tensor(&[32, 8], 1.0);
        let (y1, y2) = stack_forward(&blocks, &m.params, &x1, &x2, &layout, &mut ScoreCounter::new())?;
        let (a, b) = stack_inverse(&blocks, &m.params, &y1, &y2, &layout)?;
        worst = worst.max(a.max_abs_diff(&x1)?.as_f64()).max(b.max_abs_diff(&x2)?.as_f64());
    }
    Ok(worst)
}

fn round_trip_f64() -> Result<Check> {
    Ok(Check::bound("", round_trip::<f64>()?, 1e-8, "depths 12, 10, 8; 64-bit"))
}

fn round_trip_f32() -> Result<Check> {
    Ok(Check::bound("", round_trip::<f32>()?, 1e-4, "depths 12, 10, 8; 32-bit"))
}

fn ffn_chunk_invariance() -> Result<Check> {
    let mut rng = RngStream::new(13);
    let p = FfnParams {
        w1: rng.normal_tensor(&[8, 24], 0.3),
        b1: rng.normal_tensor(&[24], 0.1),
        w2: rng.normal_tensor(&[24, 8], 0.3),
        b2: rng.normal_tensor(&[8], 0.1),
    };
    let x: Tensor = rng.normal_tensor(&[3, 17, 8], 1.0);
    let whole = chunked_ffn(&x, &ChunkedFFNConfig { hidden_dim: 24, chunk_len: 51 }, &p)?;
    let mut same = true;
    for chunk in [1, 2, 5, 16, 50] {
        same &= chunked_ffn(&x, &ChunkedFFNConfig { hidden_dim: 24, chunk_len: chunk }, &p)? == whole;
    }
    Ok(Check::holds("", same, "chunk lengths 1, 2, 5, 16, 50 match one chunk bit for bit"))
}

fn memory_ratio() -> Result<Check> {
    let ok = [8usize, 10, 12].iter().all(|&depth| {
        activation_memory_estimate(depth, 256, 384, true) / activation_memory_estimate(depth, 256, 384, false) == 2.0 / depth as f64
    });
    Ok(Check::holds("", ok, "reversible/standard == 2/depth for depths 8, 10, 12"))
}

fn image_batch(b: usize, seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed);
    Tensor::from_fn(&[b, 3, 8, 8], |_| rng.uniform())
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn reconstructed_gradients() -> Result<Check> {
    let m = jittered::<f64>(tiny_model_config(Variant::Lsh, 2), 40, 0.3)?;
    let x = image_batch(3, 41);
    let labels = [0, 1, 2];
    let stored = m.loss_and_grads(&x, &labels, 1.0 / 3.0, GradMode::Stored, &mut ScoreCounter::new())?;
    let rec = m.loss_and_grads(&x, &labels, 1.0 / 3.0, GradMode::Reconstruct, &mut ScoreCounter::new())?;
    let mut worst = 0.0f64;
    for (name, s) in &stored.grads {
        let r = rec.grads.get(name).ok_or_else(|| anyhow::anyhow!("missing reconstructed gradient {name}"))?;
        for (a, b) in s.data().iter().zip(r.data()) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    Ok(Check::bound("", worst, 1e-6, "2-layer stack, max relative error over every parameter"))
}

fn mean_ce(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(b, &y)| {
            let row = &logits.data()[b * c..(b + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y]
        })
        .sum::<f64>()
        / labels.len() as f64
}

/// Central differences (h = 1e-5) at two sampled entries of every parameter.
fn model_gradients(variant: Variant, mode: GradMode) -> Result<Check> {
    let m = jittered::<f64>(tiny_model_config(variant, 2), 30, 0.3)?;
    let x = image_batch(2, 31);
    let labels = [2, 0];
    let out = m.loss_and_grads(&x, &labels, 0.5, mode, &mut ScoreCounter::new())?;
    let mut rng = RngStream::new(32);
    let (mut worst, mut sampled) = (0.0f64, 0);
    let h = 1e-5;
    for (name, p) in &m.params {
        for _ in 0..2 {
            let i = rng.below(p.len());
            let mut probe = m.clone();
            let mut eval = |delta: f64| -> Result<f64> {
                let mut t = p.clone();
                t.data_mut()[i] += delta;
                probe.params.insert(name.clone(), t);
                Ok(mean_ce(&probe.forward(&x, &mut ScoreCounter::new())?, &labels))
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            worst = worst.max(rel_err(out.grads[name].data()[i], numeric));
            sampled += 1;
        }
    }
    Ok(Check::bound("", worst, 1e-4, format!("depth 2, n=16, {sampled} sampled parameters, h=1e-5")))
}

fn dense_gradients() -> Result<Check> {
    model_gradients(Variant::Dense, GradMode::Stored)
}

fn lsh_gradients() -> Result<Check> {
    model_gradients(Variant::Lsh, GradMode::Reconstruct)
}
