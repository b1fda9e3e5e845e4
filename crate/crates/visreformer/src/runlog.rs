//! Run manifests, per-epoch metric logs and the wall clock.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use visreformer_core::metrics::MetricsReport;
use visreformer_core::train::Clock;
use visreformer_core::RngStream;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Compute threads used by every kernel. The numeric core is single-threaded.
pub const THREADS: usize = 1;

/// Seconds since construction, from a monotonic source.
pub struct MonotonicClock(Instant);

impl MonotonicClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_s(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Everything needed to rerun a command: its arguments, the resolved
/// configuration and the seed, plus the artifact version and thread count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact: String,
    pub version: String,
    pub verb: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub rng: String,
    pub config: Value,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(verb: &str, args: Vec<String>, seed: u64, config: Value) -> Self {
        Self {
            artifact: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            verb: verb.into(),
            args,
            seed,
            threads: THREADS,
            rng: RngStream::new(seed).algorithm().into(),
            config,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

/// Loss and classification scores of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: Option<f64>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl From<&MetricsReport> for SplitMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self {
            loss: r.loss,
            accuracy: r.accuracy,
            macro_precision: r.macro_precision,
            macro_recall: r.macro_recall,
            macro_f1: r.macro_f1,
        }
    }
}

/// One line of `metrics.jsonl`: training scores of an epoch, plus
/// validation scores when a validation split exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub epoch_time_s: Option<f64>,
    /// Attention scores evaluated during the epoch's training passes.
    pub scores_evaluated: u64,
    pub train: SplitMetrics,
    pub val: Option<SplitMetrics>,
}

/// Appends JSON lines, flushing after each so partial runs stay readable.
pub struct JsonLines(BufWriter<File>);

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?)))
    }

    pub fn push<S: Serialize>(&mut self, value: &S) -> Result<()> {
        serde_json::to_writer(&mut self.0, value)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

pub fn read_lines<D: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
        }
    }
    Ok(out)
}
