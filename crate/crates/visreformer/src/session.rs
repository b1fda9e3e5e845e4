//! Training and evaluation runs that write manifests, metric logs and checkpoints.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use visreformer_core::attention::ScoreCounter;
use visreformer_core::data::{synth_twoclass, LabeledImageSet, Split};
use visreformer_core::metrics::MetricsReport;
use visreformer_core::model::{ModelConfig, VisionModel};
use visreformer_core::optim::{lr_at, OptimizerState};
use visreformer_core::train::{evaluate, train_epoch};
use visreformer_core::{Error, Real, RngStream};

use crate::checkpoint;
use crate::cifar::load_cifar10;
use crate::config::{DataConfig, DataSource, Precision, RunConfig};
use crate::runlog::{EpochMetrics, JsonLines, Manifest, MonotonicClock, SplitMetrics};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const EVAL_FILE: &str = "eval.json";

const SYNTH_TAG: u64 = 0x5e7;
const SHUFFLE_TAG: u64 = 0x5f1;

/// Training and validation sets named by `data`, with images of `[C, H, W]`
/// for synthetic data.
pub fn load_data(data: &DataConfig, image: [usize; 3], seed: u64) -> Result<(LabeledImageSet, LabeledImageSet)> {
    match data.source {
        DataSource::Cifar10 => {
            let path = data
                .path
                .as_ref()
                .ok_or_else(|| Error::Ingestion { offset: 0, reason: "no data.path configured for cifar10".into() })?;
            load_cifar10(Path::new(path), data.subset_per_class)
        }
        DataSource::Synthetic => {
            let n = data.synthetic_train + data.synthetic_val;
            let all = synth_twoclass(n, image, data.separation, &mut RngStream::derive(seed, &[SYNTH_TAG]))?;
            let part = |range: std::ops::Range<usize>, split| -> Result<LabeledImageSet> {
                let idx: Vec<usize> = range.collect();
                let (images, labels) = all.batch::<f64>(&idx)?;
                Ok(LabeledImageSet::new(images, labels, all.class_names.clone(), split)?)
            };
            Ok((part(0..data.synthetic_train, Split::Train)?, part(data.synthetic_train..n, Split::Val)?))
        }
    }
}

/// Image shape a run's data must have, from its preset and overrides.
fn image_shape(cfg: &RunConfig) -> Result<[usize; 3]> {
    let m = cfg.model_config(2)?;
    Ok([m.patch.channels, m.patch.image_height, m.patch.image_width])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: ModelConfig,
    pub param_count: usize,
    pub epochs: Vec<EpochMetrics>,
}

/// Trains for `cfg.epochs` epochs, logging one metrics line per epoch,
/// and saves the final checkpoint. `args` is recorded in the manifest.
pub fn run_train(cfg: &RunConfig, out: &Path, args: Vec<String>) -> Result<TrainSummary> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (train, val) = load_data(&cfg.data, image_shape(cfg)?, cfg.seed)?;
    let model_cfg = cfg.model_config(train.n_classes())?;
    let mut manifest = Manifest::new(
        "train",
        args,
        cfg.seed,
        serde_json::json!({ "run": cfg, "model": model_cfg }),
    );
    manifest.outputs = vec![METRICS_FILE.into(), CHECKPOINT_FILE.into()];
    manifest.write(out)?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, model_cfg, &train, &val, out),
        Precision::F64 => train_with::<f64>(cfg, model_cfg, &train, &val, out),
    }
}

fn train_with<T: Real>(cfg: &RunConfig, model_cfg: ModelConfig, train: &LabeledImageSet, val: &LabeledImageSet, out: &Path) -> Result<TrainSummary> {
    let mut model = VisionModel::<T>::build(model_cfg.clone(), cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer);
    let tc = cfg.train_config();
    let mut rng = RngStream::derive(cfg.seed, &[SHUFFLE_TAG]);
    let clock = MonotonicClock::new();
    let mut log = JsonLines::create(&out.join(METRICS_FILE))?;
    let mut lines = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut counter = ScoreCounter::new();
        let report = train_epoch(&mut model, train, &mut opt, &tc, epoch, &mut rng, &clock, &mut counter)?;
        let val_report = if val.is_empty() { None } else { Some(evaluate(&model, val, cfg.eval_batch, &mut ScoreCounter::new())?) };
        let line = EpochMetrics {
            epoch,
            lr: lr_at(epoch as f64, &tc.schedule)?,
            epoch_time_s: report.epoch_time_s,
            scores_evaluated: counter.scores_evaluated,
            train: SplitMetrics::from(&report),
            val: val_report.as_ref().map(SplitMetrics::from),
        };
        log.push(&line)?;
        lines.push(line);
    }
    checkpoint::save(&model, Some(cfg.epochs), &out.join(CHECKPOINT_FILE))?;
    Ok(TrainSummary { param_count: model.param_count(), model: model_cfg, epochs: lines })
}

/// Evaluates a checkpoint on the validation split of `data` and writes `eval.json`.
pub fn run_eval(checkpoint_path: &Path, data: &DataConfig, seed: u64, batch: usize, out: &Path, args: Vec<String>) -> Result<MetricsReport> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (model, header) = checkpoint::load::<f64>(checkpoint_path)?;
    let p = &model.config.patch;
    let (_, val) = load_data(data, [p.channels, p.image_height, p.image_width], seed)?;
    let mut manifest = Manifest::new(
        "eval",
        args,
        seed,
        serde_json::json!({ "checkpoint": PathBuf::from(checkpoint_path), "data": data, "batch": batch, "model": header.config }),
    );
    manifest.outputs = vec![EVAL_FILE.into()];
    manifest.write(out)?;
    let report = evaluate(&model, &val, batch, &mut ScoreCounter::new())?;
    crate::runlog::write_json(&out.join(EVAL_FILE), &report)?;
    Ok(report)
}
