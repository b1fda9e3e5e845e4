//! Attention cost sweeps, log-log scaling fits and the matched-capacity gate.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::attention::{dense_attention, lsh_attention, AttentionConfig, AttentionParams, ScoreCounter};
use crate::error::{bail, Error, Result};
use crate::model::{param_layout, ModelConfig, Variant};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tokenizer::TokenSequence;
use crate::train::Clock;

/// One sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub variant: String,
    pub n: usize,
    pub bucket_size: usize,
    pub n_rounds: usize,
    pub lookback: usize,
    /// Query-key scores over all heads of one forward pass.
    pub scores_evaluated: u64,
    /// Median over the timed trials, in seconds.
    pub wall_time_s: f64,
    pub trials: usize,
    /// Analytic floats held by one forward pass.
    pub memory_estimate: f64,
    pub seed: u64,
    /// The point exceeded the memory budget and was not run.
    #[serde(default)]
    pub skipped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Scores,
    Time,
}

impl Metric {
    fn of(self, r: &BenchRecord) -> f64 {
        match self {
            Metric::Scores => r.scores_evaluated as f64,
            Metric::Time => r.wall_time_s,
        }
    }
}

/// Least-squares line through `(log2 n, log2 metric)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub variant: String,
    pub metric: Metric,
    pub exponent: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

/// Fits `log2(metric) = exponent * log2(n) + intercept` over non-skipped records.
///
/// Base 2 keeps power-of-two sweeps exact: a pure `n^2` count fits to exactly 2.
pub fn fit_scaling(records: &[BenchRecord], metric: Metric) -> Result<ScalingFit> {
    let pts: Vec<&BenchRecord> = records.iter().filter(|r| !r.skipped).collect();
    if pts.len() < 4 {
        bail!(Contract, "scaling fit needs at least 4 points, got {}", pts.len());
    }
    let variant = pts[0].variant.clone();
    if pts.iter().any(|r| r.variant != variant) {
        bail!(Contract, "scaling fit mixes variants");
    }
    if let Some(r) = pts.iter().find(|r| !metric.of(r).is_finite() || metric.of(r) <= 0.0 || r.n == 0) {
        bail!(Contract, "metric must be positive, got {} at n={}", metric.of(r), r.n);
    }
    let xs: Vec<f64> = pts.iter().map(|r| Float::log2(r.n as f64)).collect();
    let ys: Vec<f64> = pts.iter().map(|r| Float::log2(metric.of(r))).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        bail!(Contract, "scaling fit needs at least two distinct n");
    }
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| { let e = y - intercept - exponent * x; e * e }).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(ScalingFit { variant, metric, exponent, intercept, r2, points: pts.len() })
}

/// Passing result of [`matched_capacity_check`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub token_count: usize,
    pub dense_params: usize,
    pub lsh_params: usize,
    /// `dense_params - lsh_params`, the shared-QK saving.
    pub param_delta: usize,
}

/// Requires equal depth, embedding width, heads, patch size and token count;
/// lists every differing field in the error.
pub fn matched_capacity_check(dense: &ModelConfig, lsh: &ModelConfig) -> Result<CapacityReport> {
    let mut bad = Vec::new();
    let mut cmp = |name: &str, a: usize, b: usize| {
        if a != b {
            bad.push(name.to_string());
        }
    };
    cmp("depth", dense.depth, lsh.depth);
    cmp("embed_dim", dense.patch.embed_dim, lsh.patch.embed_dim);
    cmp("heads", dense.attn.heads, lsh.attn.heads);
    cmp("patch_size", dense.patch.patch_size, lsh.patch.patch_size);
    cmp("token_count", dense.token_count()?, lsh.token_count()?);
    if !bad.is_empty() {
        return Err(Error::Fairness(bad));
    }
    if dense.variant != Variant::Dense || lsh.variant != Variant::Lsh {
        bail!(Config, "capacity check expects a dense and an lsh configuration");
    }
    let count = |c: &ModelConfig| -> Result<usize> { Ok(param_layout(c)?.iter().map(|p| p.len()).sum()) };
    let (dp, lp) = (count(dense)?, count(lsh)?);
    Ok(CapacityReport {
        depth: dense.depth,
        embed_dim: dense.patch.embed_dim,
        heads: dense.attn.heads,
        patch_size: dense.patch.patch_size,
        token_count: dense.token_count()?,
        dense_params: dp,
        lsh_params: lp,
        param_delta: dp.saturating_sub(lp),
    })
}

/// Floats held by one attention forward: Q, K, V and output rows plus one
/// float per evaluated score.
pub fn attention_memory_estimate(n: usize, d: usize, scores: u64) -> f64 {
    4.0 * n as f64 * d as f64 + scores as f64
}

/// Scores dense attention evaluates for `n` tokens over `heads` heads.
pub fn dense_scores(n: usize, heads: usize) -> u64 {
    (n * n * heads) as u64
}

/// Shape of the attention layer under test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepTemplate {
    pub attn: AttentionConfig,
    pub batch: usize,
}

const INPUT_TAG: u64 = 0x1b;
const PARAM_TAG: u64 = 0x2b;
const HASH_TAG: u64 = 0x3b;

/// Seeded inputs and parameters for one sweep point; identical for both variants.
pub struct SweepPoint<T: Real> {
    pub seq: TokenSequence<T>,
    pub dense: AttentionParams<T>,
    pub lsh: AttentionParams<T>,
    pub hash_seed: u64,
}

pub fn sweep_point<T: Real>(template: &SweepTemplate, n: usize, seed: u64) -> Result<SweepPoint<T>> {
    let d = template.attn.model_dim;
    let x = RngStream::derive(seed, &[INPUT_TAG, n as u64]).normal_tensor(&[template.batch, n, d], 1.0);
    let cfg = AttentionConfig { shared_qk: false, ..template.attn.clone() };
    let std = 1.0 / libm::sqrt(d as f64);
    let dense = AttentionParams::random(&cfg, &mut RngStream::derive(seed, &[PARAM_TAG]), std);
    let lsh = dense.shared();
    let hash_seed = RngStream::derive(seed, &[HASH_TAG]).next_u64();
    Ok(SweepPoint { seq: TokenSequence::unmasked(x)?, dense, lsh, hash_seed })
}

/// Runs one forward of `variant` at a sweep point and returns its score count.
pub fn run_point<T: Real>(template: &SweepTemplate, point: &SweepPoint<T>, variant: Variant) -> Result<u64> {
    let mut counter = ScoreCounter::new();
    match variant {
        Variant::Dense => {
            let cfg = AttentionConfig { shared_qk: false, ..template.attn.clone() };
            dense_attention(&point.seq, &cfg, &point.dense, &mut counter)?;
        }
        Variant::Lsh => {
            let cfg = AttentionConfig { shared_qk: true, ..template.attn.clone() };
            lsh_attention(&point.seq, &cfg, &point.lsh, point.hash_seed, &mut counter)?;
        }
    }
    Ok(counter.scores_evaluated)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub trials: usize,
    /// Untimed runs before the timed trials.
    pub warmup: usize,
    /// Points whose memory estimate exceeds this many floats are skipped.
    pub memory_budget: Option<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn check_sweep(n_values: &[usize], variants: &[Variant], template: &SweepTemplate) -> Result<()> {
    if n_values.is_empty() || n_values.windows(2).any(|w| w[0] >= w[1]) || n_values[0] == 0 {
        bail!(Config, "n values must be positive and strictly ascending");
    }
    if variants.is_empty() {
        bail!(Config, "at least one variant is required");
    }
    template.attn.validate()
}

/// Counter-only sweep: one untimed forward per `(variant, n)`. Records carry
/// `trials = 0` and `wall_time_s = 0`, so only [`Metric::Scores`] can be fitted.
pub fn count_sweep<T: Real>(n_values: &[usize], variants: &[Variant], template: &SweepTemplate, seed: u64) -> Result<Vec<BenchRecord>> {
    check_sweep(n_values, variants, template)?;
    let mut out = Vec::new();
    for &n in n_values {
        let point = sweep_point::<T>(template, n, seed)?;
        for &variant in variants {
            let scores = run_point(template, &point, variant)?;
            let cfg = &template.attn;
            out.push(BenchRecord {
                variant: variant.name().into(),
                n,
                bucket_size: cfg.bucket_size,
                n_rounds: cfg.n_rounds,
                lookback: cfg.lookback,
                scores_evaluated: scores,
                wall_time_s: 0.0,
                trials: 0,
                memory_estimate: attention_memory_estimate(n * template.batch, cfg.model_dim, scores),
                seed,
                skipped: false,
            });
        }
    }
    Ok(out)
}

/// Times every `(variant, n)` pair; one record each, in `n_values` order
/// with variants interleaved. Both variants see the same inputs at each `n`.
pub fn sweep_attention<T: Real>(
    n_values: &[usize],
    variants: &[Variant],
    template: &SweepTemplate,
    opts: &SweepOptions,
    seed: u64,
    clock: &dyn Clock,
) -> Result<Vec<BenchRecord>> {
    if opts.trials < 3 || opts.warmup < 1 {
        bail!(Config, "timed sweeps need at least 3 trials and 1 warmup run");
    }
    check_sweep(n_values, variants, template)?;
    let d = template.attn.model_dim;
    let heads = template.attn.heads;
    let mut out = Vec::new();
    for &n in n_values {
        let point = sweep_point::<T>(template, n, seed)?;
        for &variant in variants {
            let cfg = &template.attn;
            let bound = match variant {
                Variant::Dense => dense_scores(n, heads),
                Variant::Lsh => cfg.lsh_score_bound(n) * heads as u64,
            } * template.batch as u64;
            let mut rec = BenchRecord {
                variant: variant.name().into(),
                n,
                bucket_size: cfg.bucket_size,
                n_rounds: cfg.n_rounds,
                lookback: cfg.lookback,
                scores_evaluated: 0,
                wall_time_s: 0.0,
                trials: opts.trials,
                memory_estimate: attention_memory_estimate(n * template.batch, d, bound),
                seed,
                skipped: false,
            };
            if opts.memory_budget.is_some_and(|b| rec.memory_estimate > b) {
                rec.skipped = true;
                out.push(rec);
                continue;
            }
            for _ in 0..opts.warmup {
                run_point(template, &point, variant)?;
            }
            let mut times = Vec::with_capacity(opts.trials);
            for _ in 0..opts.trials {
                let t0 = clock.now_s();
                rec.scores_evaluated = run_point(template, &point, variant)?;
                times.push(clock.now_s() - t0);
            }
            rec.wall_time_s = median(times);
            rec.memory_estimate = attention_memory_estimate(n * template.batch, d, rec.scores_evaluated);
            out.push(rec);
        }
    }
    Ok(out)
}

/// Records of one variant, in sweep order.
pub fn records_for(records: &[BenchRecord], variant: &str) -> Vec<BenchRecord> {
    records.iter().filter(|r| r.variant == variant).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: usize, scores: u64, t: f64) -> BenchRecord {
        BenchRecord {
            variant: "dense".into(),
            n,
            bucket_size: 16,
            n_rounds: 2,
            lookback: 1,
            scores_evaluated: scores,
            wall_time_s: t,
            trials: 3,
            memory_estimate: 0.0,
            seed: 0,
            skipped: false,
        }
    }

    #[test]
    fn exact_power_laws() {
        let rs: Vec<_> = [8usize, 16, 32, 64, 128].iter().map(|&n| rec(n, (n * n) as u64, 3.0 * n as f64)).collect();
        let f = fit_scaling(&rs, Metric::Scores).unwrap();
        assert!((f.exponent - 2.0).abs() < 1e-9 && (f.r2 - 1.0).abs() < 1e-12);
        let f = fit_scaling(&rs, Metric::Time).unwrap();
        assert!((f.exponent - 1.0).abs() < 1e-9);
        assert!((libm::exp2(f.intercept) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn fit_preconditions() {
        let rs: Vec<_> = [8usize, 16, 32].iter().map(|&n| rec(n, 1, 1.0)).collect();
        assert!(matches!(fit_scaling(&rs, Metric::Scores), Err(Error::Contract(_))));
        let mut rs: Vec<_> = [8usize, 16, 32, 64].iter().map(|&n| rec(n, 1, 1.0)).collect();
        rs[2].wall_time_s = 0.0;
        assert!(matches!(fit_scaling(&rs, Metric::Time), Err(Error::Contract(_))));
    }

    #[test]
    fn median_of_trials() {
        assert_eq!(median(alloc::vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(alloc::vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
