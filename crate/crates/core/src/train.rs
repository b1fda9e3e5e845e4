//! Training steps with gradient accumulation, epochs, and evaluation.

use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::attention::ScoreCounter;
use crate::data::{augment, AugmentPolicy, LabeledImageSet};
use crate::error::{bail, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{GradMode, VisionModel};
use crate::optim::{adamw_step, lr_at, OptimizerState, Schedule};
use crate::params::{accumulate, ParamMap};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Monotonic time source in seconds.
pub trait Clock {
    fn now_s(&self) -> f64;
}

/// A clock that never advances; epoch times read as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_s(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumConfig {
    /// Samples per forward/backward pass.
    pub micro_batch: usize,
    /// Passes per optimizer step.
    pub steps: usize,
}

impl AccumConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.steps == 0 {
            bail!(Config, "micro batch and accumulation steps must be positive");
        }
        Ok(())
    }
}

/// One labeled micro-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Real = f64> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Loss and predictions gathered while taking one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean cross-entropy over every sample of the step.
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (b, c) = logits.dims2()?;
    Ok((0..b)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect())
}

/// Sums gradients of `k` micro-batches, each scaled by `1 / (k * B_micro)`,
/// then applies exactly one AdamW step.
pub fn accumulate_and_step<T: Real>(
    model: &mut VisionModel<T>,
    micro_batches: &[Batch<T>],
    optimizer: &mut OptimizerState<T>,
    accum: &AccumConfig,
    lr: f64,
    mode: GradMode,
    counter: &mut ScoreCounter,
) -> Result<StepOutcome> {
    accum.validate()?;
    if micro_batches.len() != accum.steps {
        bail!(Contract, "expected {} micro-batches, got {}", accum.steps, micro_batches.len());
    }
    if let Some(b) = micro_batches.iter().find(|b| b.labels.len() != accum.micro_batch) {
        bail!(Contract, "micro-batch of {} samples, expected {}", b.labels.len(), accum.micro_batch);
    }
    let weight = 1.0 / accum.effective_batch() as f64;
    let mut grads = ParamMap::new();
    let mut out = StepOutcome { loss: 0.0, predictions: Vec::new(), labels: Vec::new() };
    for b in micro_batches {
        let r = model.loss_and_grads(&b.images, &b.labels, weight, mode, counter)?;
        accumulate(&mut grads, r.grads)?;
        out.loss += r.loss;
        out.predictions.extend(argmax_rows(&r.logits)?);
        out.labels.extend_from_slice(&b.labels);
    }
    adamw_step(&mut model.params, &grads, optimizer, lr)?;
    Ok(out)
}

/// Everything an epoch needs besides the model, data and optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub accum: AccumConfig,
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub grad_mode: GradMode,
}

/// One pass over `data` in a seeded shuffled order, dropping the final
/// partial effective batch. Returns training metrics over the samples seen;
/// `epoch_time_s` covers shuffling, batching, augmentation, forward,
/// backward and optimizer work.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Real>(
    model: &mut VisionModel<T>,
    data: &LabeledImageSet,
    optimizer: &mut OptimizerState<T>,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut RngStream,
    clock: &dyn Clock,
    counter: &mut ScoreCounter,
) -> Result<MetricsReport> {
    cfg.accum.validate()?;
    if data.is_empty() {
        bail!(Config, "training set is empty");
    }
    let eff = cfg.accum.effective_batch();
    let steps = data.len() / eff;
    if steps == 0 {
        bail!(Config, "training set of {} samples is smaller than the effective batch {}", data.len(), eff);
    }
    let start = clock.now_s();
    let order = rng.permutation(data.len());
    let mut confusion = ConfusionMatrix::new(data.n_classes());
    let mut loss_sum = 0.0;
    for s in 0..steps {
        let mut micro = Vec::with_capacity(cfg.accum.steps);
        for k in 0..cfg.accum.steps {
            let at = s * eff + k * cfg.accum.micro_batch;
            let (images, labels) = data.batch::<T>(&order[at..at + cfg.accum.micro_batch])?;
            let images = augment(&images, &cfg.augment, rng)?;
            micro.push(Batch { images, labels });
        }
        let lr = lr_at(epoch as f64 + s as f64 / steps as f64, &cfg.schedule)?;
        let out = accumulate_and_step(model, &micro, optimizer, &cfg.accum, lr, cfg.grad_mode, counter)?;
        loss_sum += out.loss;
        for (&t, &p) in out.labels.iter().zip(&out.predictions) {
            confusion.record(t, p)?;
        }
    }
    let elapsed = clock.now_s() - start;
    let mut report = MetricsReport::from_confusion(confusion);
    report.loss = Some(loss_sum / steps as f64);
    report.epoch_time_s = Some(elapsed);
    Ok(report)
}

/// Metrics of the model's predictions on `data`, in index order.
pub fn evaluate<T: Real>(model: &VisionModel<T>, data: &LabeledImageSet, batch_size: usize, counter: &mut ScoreCounter) -> Result<MetricsReport> {
    if batch_size == 0 {
        bail!(Config, "batch size must be positive");
    }
    if data.n_classes() != model.config.n_classes {
        bail!(Data, "dataset has {} classes, model {}", data.n_classes(), model.config.n_classes);
    }
    let mut confusion = ConfusionMatrix::new(data.n_classes());
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (images, labels) = data.batch::<T>(chunk)?;
        let logits = model.forward(&images, counter)?;
        let (b, c) = logits.dims2()?;
        for (i, (&t, p)) in labels.iter().zip(argmax_rows(&logits)?).enumerate() {
            confusion.record(t, p)?;
            let row = &logits.data()[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = Float::ln(row.iter().map(|v| Float::exp(v.as_f64() - max)).sum::<f64>()) + max;
            loss += lse - row[t].as_f64();
        }
        debug_assert_eq!(b, chunk.len());
    }
    let mut report = MetricsReport::from_confusion(confusion);
    report.loss = Some(if data.is_empty() { 0.0 } else { loss / data.len() as f64 });
    Ok(report)
}
