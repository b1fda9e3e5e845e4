//! Training run configuration: a JSON document plus dotted `key=value` overrides.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use visreformer_core::data::AugmentPolicy;
use visreformer_core::model::{GradMode, ModelConfig, Variant};
use visreformer_core::optim::{AdamWConfig, Schedule};
use visreformer_core::train::{AccumConfig, TrainConfig};

use crate::failure::usage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the CIFAR-10 binary batches.
    pub path: Option<String>,
    pub subset_per_class: Option<usize>,
    /// Training and validation sizes of the synthetic two-class set.
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    pub separation: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            subset_per_class: None,
            synthetic_train: 256,
            synthetic_val: 64,
            separation: 0.3,
        }
    }
}

/// Optional replacements for preset fields, applied identically to either variant.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub depth: Option<usize>,
    pub embed_dim: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_hidden: Option<usize>,
    pub ffn_chunk: Option<usize>,
    pub bucket_size: Option<usize>,
    pub n_rounds: Option<usize>,
    pub lookback: Option<usize>,
    pub patch_size: Option<usize>,
    pub image_size: Option<usize>,
    pub stem_channels: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub lr: f64,
    pub warmup_epochs: f64,
    pub min_lr: f64,
    pub optimizer: AdamWConfig,
    pub grad_mode: GradMode,
    pub precision: Precision,
    pub augment: AugmentPolicy,
    pub eval_batch: usize,
    pub data: DataConfig,
    pub model: ModelOverrides,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "cifar10".into(),
            variant: Variant::Lsh,
            seed: 0,
            epochs: 5,
            micro_batch: 8,
            accum_steps: 4,
            lr: 1e-3,
            warmup_epochs: 1.0,
            min_lr: 1e-6,
            optimizer: AdamWConfig::default(),
            grad_mode: GradMode::Auto,
            precision: Precision::F32,
            // Off by default: flips would scramble the synthetic class patterns.
            augment: AugmentPolicy { enabled: false, ..AugmentPolicy::default() },
            eval_batch: 32,
            data: DataConfig::default(),
            model: ModelOverrides::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any) over the defaults, then applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str::<RunConfig>(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        base.with_overrides(overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        serde_json::from_value(doc).map_err(|e| usage(format!("invalid override: {e}")))
    }

    /// The preset with overrides applied, for a dataset of `n_classes` classes.
    pub fn model_config(&self, n_classes: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset, self.variant)?;
        let o = &self.model;
        if let Some(v) = o.depth {
            c.depth = v;
        }
        if let Some(v) = o.embed_dim {
            c.patch.embed_dim = v;
            c.attn.model_dim = v;
        }
        if let Some(v) = o.heads {
            c.attn.heads = v;
        }
        if let Some(v) = o.ffn_hidden {
            c.ffn.hidden_dim = v;
        }
        if let Some(v) = o.ffn_chunk {
            c.ffn.chunk_len = v;
        }
        if let Some(v) = o.bucket_size {
            c.attn.bucket_size = v;
        }
        if let Some(v) = o.n_rounds {
            c.attn.n_rounds = v;
        }
        if let Some(v) = o.lookback {
            c.attn.lookback = v;
        }
        if let Some(v) = o.patch_size {
            c.patch.patch_size = v;
        }
        if let Some(v) = o.image_size {
            c.patch.image_height = v;
            c.patch.image_width = v;
        }
        if let Some(v) = o.stem_channels {
            c.patch.stem_channels = v;
        }
        c.n_classes = n_classes;
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: Schedule {
                base_lr: self.lr,
                warmup_epochs: self.warmup_epochs,
                total_epochs: self.epochs as f64,
                min_lr: self.min_lr.min(self.lr),
            },
            accum: AccumConfig { micro_batch: self.micro_batch, steps: self.accum_steps },
            augment: self.augment,
            grad_mode: self.grad_mode,
        }
    }
}

/// Sets one dotted key of a JSON document. The value is parsed as JSON when
/// possible and taken as a string otherwise. Unknown keys are usage errors.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| usage(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(usage(format!("override key {key:?}: {:?} is not a section", parts[..i].join("."))));
        };
        let Some(child) = map.get_mut(*part) else {
            return Err(usage(format!("unknown override key {key:?}")));
        };
        node = child;
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::failure::{classify, ExitStatus};

    #[test]
    fn overrides_reach_nested_fields() {
        let c = RunConfig::default()
            .with_overrides(&["lr=0".into(), "model.depth=2".into(), "data.source=cifar10".into(), "variant=dense".into()])
            .unwrap();
        assert_eq!((c.lr, c.model.depth, c.data.source, c.variant), (0.0, Some(2), DataSource::Cifar10, Variant::Dense));
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        for bad in ["nokey", "model.depthh=2", "lr.x=1", "epochs=\"many\""] {
            let e = RunConfig::default().with_overrides(&[bad.into()]).unwrap_err();
            assert_eq!(classify(&e), ExitStatus::Usage, "{bad}");
        }
    }

    #[test]
    fn overrides_keep_variants_matched() {
        let c = RunConfig::default().with_overrides(&["model.depth=3".into(), "model.embed_dim=32".into(), "model.heads=2".into()]).unwrap();
        let lsh = c.model_config(2).unwrap();
        let dense = RunConfig { variant: Variant::Dense, ..c }.model_config(2).unwrap();
        visreformer_core::bench::matched_capacity_check(&dense, &lsh).unwrap();
        assert_eq!((lsh.depth, lsh.patch.embed_dim, lsh.attn.model_dim, lsh.n_classes), (3, 32, 32, 2));
    }
}
