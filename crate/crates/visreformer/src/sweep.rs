//! Attention sweeps with a real clock, scaling fits and report files.

use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use visreformer_core::attention::AttentionConfig;
use visreformer_core::bench::{count_sweep, fit_scaling, records_for, sweep_attention, BenchRecord, Metric, ScalingFit, SweepOptions, SweepTemplate};
use visreformer_core::model::Variant;
use visreformer_core::train::Clock;

use crate::config::Precision;
use crate::report::{write_csv, write_svg, BenchReport};
use crate::runlog::{write_json, THREADS};

/// A full sweep description; also the `config` section of a bench manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub n_values: Vec<usize>,
    pub variants: Vec<Variant>,
    pub trials: usize,
    pub warmup: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub bucket_size: usize,
    pub n_rounds: usize,
    pub lookback: usize,
    pub batch: usize,
    pub precision: Precision,
    /// Skip points whose memory estimate exceeds this many floats.
    pub memory_budget: Option<f64>,
    /// Count scores without timing.
    pub counts_only: bool,
    pub seed: u64,
}

impl BenchSpec {
    /// Desk-scale timing shape: head width 64 as in the presets, two heads,
    /// bucket 16, two rounds, one lookback chunk.
    pub fn desk(n_values: Vec<usize>) -> Self {
        Self {
            n_values,
            variants: vec![Variant::Dense, Variant::Lsh],
            trials: 5,
            warmup: 1,
            heads: 2,
            model_dim: 128,
            bucket_size: 16,
            n_rounds: 2,
            lookback: 1,
            batch: 1,
            precision: Precision::F32,
            memory_budget: None,
            counts_only: false,
            seed: 0,
        }
    }

    pub fn template(&self) -> SweepTemplate {
        SweepTemplate {
            attn: AttentionConfig {
                heads: self.heads,
                model_dim: self.model_dim,
                bucket_size: self.bucket_size,
                n_rounds: self.n_rounds,
                lookback: self.lookback,
                shared_qk: false,
            },
            batch: self.batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOutcome {
    pub records: Vec<BenchRecord>,
    pub fits: Vec<ScalingFit>,
}

/// Runs the sweep and fits, per variant, the score count and (when timed) the
/// wall time. Variants with fewer than four usable points get no fit.
pub fn run_sweep(spec: &BenchSpec, clock: &dyn Clock) -> Result<BenchOutcome> {
    let template = spec.template();
    let records = match (spec.counts_only, spec.precision) {
        (true, Precision::F32) => count_sweep::<f32>(&spec.n_values, &spec.variants, &template, spec.seed)?,
        (true, Precision::F64) => count_sweep::<f64>(&spec.n_values, &spec.variants, &template, spec.seed)?,
        (false, p) => {
            let opts = SweepOptions { trials: spec.trials, warmup: spec.warmup, memory_budget: spec.memory_budget };
            match p {
                Precision::F32 => sweep_attention::<f32>(&spec.n_values, &spec.variants, &template, &opts, spec.seed, clock)?,
                Precision::F64 => sweep_attention::<f64>(&spec.n_values, &spec.variants, &template, &opts, spec.seed, clock)?,
            }
        }
    };
    let mut fits = Vec::new();
    for v in &spec.variants {
        let rs = records_for(&records, v.name());
        if rs.iter().filter(|r| !r.skipped).count() < 4 {
            continue;
        }
        fits.push(fit_scaling(&rs, Metric::Scores)?);
        if !spec.counts_only {
            fits.push(fit_scaling(&rs, Metric::Time)?);
        }
    }
    Ok(BenchOutcome { records, fits })
}

pub const CSV_FILE: &str = "bench.csv";
pub const JSON_FILE: &str = "bench.json";
pub const SCORES_SVG: &str = "scores.svg";
pub const TIME_SVG: &str = "time.svg";

/// Writes the CSV, JSON and SVG reports into `dir`; returns the file names.
pub fn emit_reports(outcome: &BenchOutcome, spec: &BenchSpec, dir: &Path) -> Result<Vec<String>> {
    write_csv(&outcome.records, &dir.join(CSV_FILE))?;
    let report = BenchReport { seed: spec.seed, threads: THREADS, records: outcome.records.clone(), fits: outcome.fits.clone() };
    write_json(&dir.join(JSON_FILE), &report)?;
    let mut files = vec![CSV_FILE.to_string(), JSON_FILE.to_string()];
    if outcome.records.iter().any(|r| !r.skipped && r.scores_evaluated > 0) {
        write_svg(&outcome.records, &outcome.fits, Metric::Scores, &dir.join(SCORES_SVG))?;
        files.push(SCORES_SVG.into());
    }
    if !spec.counts_only && outcome.records.iter().any(|r| !r.skipped && r.wall_time_s > 0.0) {
        write_svg(&outcome.records, &outcome.fits, Metric::Time, &dir.join(TIME_SVG))?;
        files.push(TIME_SVG.into());
    }
    Ok(files)
}
