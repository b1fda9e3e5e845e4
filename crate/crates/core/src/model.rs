//! The two matched classifiers.
//!
//! Both share the stem, patch projection, learned positions, pooling and head.
//! The dense variant stacks standard pre-norm residual blocks with separate
//! Q/K projections. The LSH variant duplicates the token embedding into two
//! streams, runs reversible blocks whose `F` is shared-QK LSH attention, and
//! averages the two streams at the top.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, LshSeed, ScoreCounter, SeqLayout};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::params::{accumulate, Bound, ParamMap};
use crate::real::Real;
use crate::revblocks::{
    rev_forward_graph, stack_backward, stack_forward, AttentionKind, AttentionSublayer, ChunkedFFNConfig,
    FeedForwardSublayer, ReversibleBlock, Sublayer, NORM_EPS,
};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::tokenizer::{check_images, patch_embed_graph, PatchConfig, StemVars, TokenSequence};

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

const INIT_TAG: u64 = 0x1417;
const LSH_TAG: u64 = 0x15a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Dense attention, standard residual blocks.
    Dense,
    /// LSH attention in reversible blocks.
    Lsh,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Lsh => "lsh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Variant::Dense),
            "lsh" => Ok(Variant::Lsh),
            _ => bail!(Config, "unknown variant {:?} (expected dense or lsh)", s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub depth: usize,
    pub patch: PatchConfig,
    pub attn: AttentionConfig,
    pub ffn: ChunkedFFNConfig,
    pub n_classes: usize,
    pub preset: Option<String>,
}

/// Names accepted by [`ModelConfig::preset`].
pub const PRESETS: [&str; 3] = ["cifar10", "imagenet100", "retinopathy"];

impl ModelConfig {
    /// Named configuration; the variant decides shared-QK.
    ///
    /// All presets use `D = 384`, 6 heads, FFN width `4 D`, bucket size 16,
    /// two hashing rounds, one lookback chunk and a 16-channel 3x3 stem.
    pub fn preset(name: &str, variant: Variant) -> Result<Self> {
        let (side, patch, depth, n_classes) = match name {
            "cifar10" => (32, 2, 12, 10),
            "imagenet100" => (224, 14, 10, 100),
            "retinopathy" => (560, 20, 8, 5),
            _ => bail!(Config, "unknown preset {:?} (expected one of {:?})", name, PRESETS),
        };
        let d = 384;
        let cfg = Self {
            variant,
            depth,
            patch: PatchConfig {
                image_height: side,
                image_width: side,
                channels: 3,
                patch_size: patch,
                embed_dim: d,
                stem_channels: 16,
                stem_kernel: 3,
            },
            attn: AttentionConfig {
                heads: 6,
                model_dim: d,
                bucket_size: 16,
                n_rounds: 2,
                lookback: 1,
                shared_qk: variant == Variant::Lsh,
            },
            ffn: ChunkedFFNConfig { hidden_dim: 4 * d, chunk_len: 128 },
            n_classes,
            preset: Some(name.into()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same configuration for the other variant.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.variant = variant;
        c.attn.shared_qk = variant == Variant::Lsh;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.attn.validate()?;
        if self.attn.model_dim != self.patch.embed_dim {
            bail!(Config, "attention dim {} differs from embed dim {}", self.attn.model_dim, self.patch.embed_dim);
        }
        if self.attn.shared_qk != (self.variant == Variant::Lsh) {
            bail!(Config, "shared_qk must be set exactly for the lsh variant");
        }
        if self.n_classes == 0 {
            bail!(Config, "n_classes must be positive");
        }
        if self.ffn.hidden_dim == 0 || self.ffn.chunk_len == 0 {
            bail!(Config, "ffn hidden_dim and chunk_len must be positive");
        }
        Ok(())
    }

    pub fn token_count(&self) -> Result<usize> {
        self.patch.token_count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncatedNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: &[usize], init: Init) -> Self {
        Self { name, shape: shape.to_vec(), init }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every parameter of a configuration, in construction order.
pub fn param_layout(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    use Init::*;
    cfg.validate()?;
    let p = &cfg.patch;
    let (c, s, k, d) = (p.channels, p.stem_channels, p.stem_kernel, p.embed_dim);
    let n = cfg.token_count()?;
    let h = cfg.ffn.hidden_dim;
    let mut out = vec![
        ParamSpec::new("stem.conv1.weight".into(), &[s, c, k, k], TruncatedNormal),
        ParamSpec::new("stem.conv1.bias".into(), &[s], Zeros),
        ParamSpec::new("stem.conv2.weight".into(), &[s, s, k, k], TruncatedNormal),
        ParamSpec::new("stem.conv2.bias".into(), &[s], Zeros),
        ParamSpec::new("patch.weight".into(), &[p.patch_features(), d], TruncatedNormal),
        ParamSpec::new("patch.bias".into(), &[d], Zeros),
        ParamSpec::new("pos.table".into(), &[n, d], TruncatedNormal),
    ];
    for l in 0..cfg.depth {
        let name = |leaf: &str| format!("blocks.{l}.{leaf}");
        out.push(ParamSpec::new(name("attn_norm.gain"), &[d], Ones));
        out.push(ParamSpec::new(name("attn_norm.bias"), &[d], Zeros));
        out.push(ParamSpec::new(name("attn.wq"), &[d, d], TruncatedNormal));
        if !cfg.attn.shared_qk {
            out.push(ParamSpec::new(name("attn.wk"), &[d, d], TruncatedNormal));
        }
        out.push(ParamSpec::new(name("attn.wv"), &[d, d], TruncatedNormal));
        out.push(ParamSpec::new(name("attn.wo"), &[d, d], TruncatedNormal));
        out.push(ParamSpec::new(name("attn.bo"), &[d], Zeros));
        out.push(ParamSpec::new(name("ffn_norm.gain"), &[d], Ones));
        out.push(ParamSpec::new(name("ffn_norm.bias"), &[d], Zeros));
        out.push(ParamSpec::new(name("ffn.w1"), &[d, h], TruncatedNormal));
        out.push(ParamSpec::new(name("ffn.b1"), &[h], Zeros));
        out.push(ParamSpec::new(name("ffn.w2"), &[h, d], TruncatedNormal));
        out.push(ParamSpec::new(name("ffn.b2"), &[d], Zeros));
    }
    out.push(ParamSpec::new("norm.gain".into(), &[d], Ones));
    out.push(ParamSpec::new("norm.bias".into(), &[d], Zeros));
    out.push(ParamSpec::new("head.weight".into(), &[d, cfg.n_classes], TruncatedNormal));
    out.push(ParamSpec::new("head.bias".into(), &[cfg.n_classes], Zeros));
    Ok(out)
}

/// FNV-1a; keys each parameter's random stream by its name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// How [`VisionModel::loss_and_grads`] obtains activations for backpropagation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    /// Reconstruct for the LSH variant, store for the dense one.
    #[default]
    Auto,
    /// Keep every activation on one tape.
    Stored,
    /// Recompute block inputs from outputs (reversible stacks only).
    Reconstruct,
}

/// Output of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct LossGrads<T: Real> {
    /// `weight * sum of per-sample cross-entropy`.
    pub loss: f64,
    pub logits: Tensor<T>,
    pub grads: ParamMap<T>,
}

/// Shared block stack: either standard residual pairs or reversible blocks.
fn branches(cfg: &ModelConfig, l: usize, seed: LshSeed) -> (AttentionSublayer, FeedForwardSublayer) {
    let prefix = format!("blocks.{l}");
    let kind = match cfg.variant {
        Variant::Dense => AttentionKind::Dense,
        Variant::Lsh => AttentionKind::Lsh(seed),
    };
    (
        AttentionSublayer { prefix: prefix.clone(), cfg: cfg.attn.clone(), kind },
        FeedForwardSublayer { prefix, cfg: cfg.ffn },
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionModel<T: Real = f64> {
    pub params: ParamMap<T>,
    pub config: ModelConfig,
    pub master_seed: u64,
}

impl<T: Real> VisionModel<T> {
    /// Deterministic initialization: each parameter draws from a stream keyed
    /// by `(master_seed, name)`, so both variants share every common tensor.
    pub fn build(config: ModelConfig, master_seed: u64) -> Result<Self> {
        let mut params = ParamMap::new();
        for spec in param_layout(&config)? {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
                Init::TruncatedNormal => {
                    let mut rng = RngStream::derive(master_seed, &[INIT_TAG, name_hash(&spec.name)]);
                    rng.truncated_normal_tensor(&spec.shape, INIT_STD)
                }
            };
            params.insert(spec.name, t);
        }
        Ok(Self { params, config, master_seed })
    }

    /// Reassembles a model, checking names and shapes against the layout.
    pub fn from_parts(config: ModelConfig, master_seed: u64, params: ParamMap<T>) -> Result<Self> {
        let layout = param_layout(&config)?;
        if layout.len() != params.len() {
            bail!(Config, "expected {} parameters, found {}", layout.len(), params.len());
        }
        for spec in &layout {
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => bail!(Config, "parameter {} has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape),
                None => bail!(Config, "missing parameter {}", spec.name),
            }
        }
        Ok(Self { params, config, master_seed })
    }

    pub fn param_count(&self) -> usize {
        crate::params::count(&self.params)
    }

    /// Hashing seed of block `l`, fixed for the model's lifetime.
    pub fn layer_seed(&self, l: usize) -> LshSeed {
        RngStream::derive(self.master_seed, &[LSH_TAG, l as u64]).next_u64()
    }

    /// Reversible blocks of the LSH variant.
    pub fn reversible_blocks(&self) -> Result<Vec<ReversibleBlock<T>>> {
        if self.config.variant != Variant::Lsh {
            bail!(Config, "only the lsh variant uses reversible blocks");
        }
        Ok((0..self.config.depth)
            .map(|l| {
                let (f, g) = branches(&self.config, l, self.layer_seed(l));
                ReversibleBlock::new(f, g)
            })
            .collect())
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<usize> {
        check_images(images, &self.config.patch, self.config.patch.channels)?;
        Ok(images.shape()[0])
    }

    fn names_with_prefix<'a>(&'a self, prefixes: &'a [&str]) -> impl Iterator<Item = &'a str> {
        self.params.keys().map(String::as_str).filter(move |k| prefixes.iter().any(|p| k.starts_with(p)))
    }

    /// Stem, patch projection and positions: `[B, C, H, W]` to `[B * n, D]`.
    pub fn embed_graph(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Var> {
        let cfg = &self.config.patch;
        let stem = StemVars {
            conv1_weight: p.get("stem.conv1.weight")?,
            conv1_bias: p.get("stem.conv1.bias")?,
            conv2_weight: p.get("stem.conv2.weight")?,
            conv2_bias: p.get("stem.conv2.bias")?,
        };
        let feats = crate::tokenizer::stem_graph(g, images, cfg, &stem)?;
        let tokens = patch_embed_graph(g, feats, cfg, p.get("patch.weight")?, p.get("patch.bias")?)?;
        g.add_positions(tokens, p.get("pos.table")?, self.config.token_count()?)
    }

    /// Encoder blocks on `[B * n, D]` rows.
    pub fn blocks_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var, layout: &SeqLayout, counter: &mut ScoreCounter) -> Result<Var> {
        match self.config.variant {
            Variant::Dense => {
                let mut x = x;
                for l in 0..self.config.depth {
                    let (f, ffn) = branches(&self.config, l, 0);
                    let a = Sublayer::<T>::apply(&f, g, p, x, layout, counter)?;
                    x = g.add(x, a)?;
                    let m = Sublayer::<T>::apply(&ffn, g, p, x, layout, counter)?;
                    x = g.add(x, m)?;
                }
                Ok(x)
            }
            Variant::Lsh => {
                let (mut x1, mut x2) = (x, x);
                for block in self.reversible_blocks()? {
                    (x1, x2) = rev_forward_graph(g, &block, p, x1, x2, layout, counter)?;
                }
                let s = g.add(x1, x2)?;
                g.scale(s, T::from_f64(0.5))
            }
        }
    }

    /// Final norm, masked mean pool and linear head: `[B * n, D]` to `[B, classes]`.
    pub fn head_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var, layout: &SeqLayout) -> Result<Var> {
        let h = g.layer_norm(x, p.get("norm.gain")?, p.get("norm.bias")?, T::from_f64(NORM_EPS))?;
        let pooled = g.masked_mean_pool(h, &layout.mask, layout.tokens)?;
        g.linear(pooled, p.get("head.weight")?, Some(p.get("head.bias")?))
    }

    /// Full classifier on a graph.
    pub fn logits_graph(&self, g: &mut Graph<T>, p: &Bound, images: Var, counter: &mut ScoreCounter) -> Result<Var> {
        let batch = g.shape(images)[0];
        let layout = SeqLayout::dense(batch, self.config.token_count()?);
        let e = self.embed_graph(g, p, images)?;
        let x = self.blocks_graph(g, p, e, &layout, counter)?;
        self.head_graph(g, p, x, &layout)
    }

    fn bind_all(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound> {
        Bound::bind(g, &self.params, self.params.keys().map(String::as_str), trainable)
    }

    /// Logits `[B, n_classes]`; adds attention scores to `counter`.
    pub fn forward(&self, images: &Tensor<T>, counter: &mut ScoreCounter) -> Result<Tensor<T>> {
        self.check_input(images)?;
        let mut g = Graph::new();
        let p = self.bind_all(&mut g, false)?;
        let x = g.constant(images.clone());
        let y = self.logits_graph(&mut g, &p, x, counter)?;
        Ok(g.value(y).clone())
    }

    /// Token sequence entering the encoder blocks.
    pub fn tokenize(&self, images: &Tensor<T>) -> Result<TokenSequence<T>> {
        let b = self.check_input(images)?;
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &self.params, self.names_with_prefix(&["stem.", "patch.", "pos."]), false)?;
        let x = g.constant(images.clone());
        let e = self.embed_graph(&mut g, &p, x)?;
        let n = self.config.token_count()?;
        TokenSequence::unmasked(g.value(e).clone().reshape(&[b, n, self.config.patch.embed_dim])?)
    }

    /// Cross-entropy `weight * sum_b CE_b` and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        images: &Tensor<T>,
        labels: &[usize],
        weight: f64,
        mode: GradMode,
        counter: &mut ScoreCounter,
    ) -> Result<LossGrads<T>> {
        self.check_input(images)?;
        let reconstruct = match (mode, self.config.variant) {
            (GradMode::Auto, v) => v == Variant::Lsh,
            (GradMode::Stored, _) => false,
            (GradMode::Reconstruct, Variant::Lsh) => true,
            (GradMode::Reconstruct, Variant::Dense) => {
                bail!(Contract, "activation reconstruction needs reversible blocks")
            }
        };
        if reconstruct {
            return self.loss_and_grads_reconstruct(images, labels, weight, counter);
        }
        let mut g = Graph::new();
        let p = self.bind_all(&mut g, true)?;
        let x = g.constant(images.clone());
        let logits = self.logits_graph(&mut g, &p, x, counter)?;
        let loss = g.cross_entropy(logits, labels, T::from_f64(weight))?;
        let back = g.backward(loss)?;
        Ok(LossGrads { loss: g.value(loss).data()[0].as_f64(), logits: g.value(logits).clone(), grads: p.collect(&g, &back) })
    }

    /// Backpropagation holding only the embedding and the top stream pair.
    fn loss_and_grads_reconstruct(
        &self,
        images: &Tensor<T>,
        labels: &[usize],
        weight: f64,
        counter: &mut ScoreCounter,
    ) -> Result<LossGrads<T>> {
        let layout = SeqLayout::dense(images.shape()[0], self.config.token_count()?);

        let mut ge = Graph::new();
        let pe = Bound::bind(&mut ge, &self.params, self.names_with_prefix(&["stem.", "patch.", "pos."]), true)?;
        let x = ge.constant(images.clone());
        let e = self.embed_graph(&mut ge, &pe, x)?;
        let emb = ge.value(e).clone().with_requires_grad(false);

        let blocks = self.reversible_blocks()?;
        let (y1, y2) = stack_forward(&blocks, &self.params, &emb, &emb, &layout, counter)?;

        let mut gh = Graph::new();
        let ph = Bound::bind(&mut gh, &self.params, self.names_with_prefix(&["norm.", "head."]), true)?;
        let y1v = gh.leaf(y1.clone().with_requires_grad(true));
        let y2v = gh.leaf(y2.clone().with_requires_grad(true));
        let s = gh.add(y1v, y2v)?;
        let top = gh.scale(s, T::from_f64(0.5))?;
        let logits = self.head_graph(&mut gh, &ph, top, &layout)?;
        let loss = gh.cross_entropy(logits, labels, T::from_f64(weight))?;
        let back = gh.backward(loss)?;
        let mut grads = ph.collect(&gh, &back);
        let dy1 = back.get_or_zeros(y1v, y1.shape());
        let dy2 = back.get_or_zeros(y2v, y2.shape());

        let stack = stack_backward(&blocks, &self.params, &y1, &y2, &dy1, &dy2, &layout)?;
        accumulate(&mut grads, stack.grads)?;
        let de = stack.dx1.zip_map(&stack.dx2, |a, b| a + b)?;
        let back = ge.backward_with(e, de)?;
        accumulate(&mut grads, pe.collect(&ge, &back))?;
        Ok(LossGrads { loss: gh.value(loss).data()[0].as_f64(), logits: gh.value(logits).clone(), grads })
    }
}

/// Scalar parameter count of a model.
pub fn param_count<T: Real>(model: &VisionModel<T>) -> usize {
    model.param_count()
}

/// Mean over unmasked tokens of each item: `[B, n, D]` to `[B, D]`.
pub fn pool_tokens<T: Real>(seq: &TokenSequence<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(seq.rows()?);
    let y = g.masked_mean_pool(x, &seq.mask, seq.len())?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_unknown_name() {
        let c = ModelConfig::preset("cifar10", Variant::Dense).unwrap();
        assert_eq!((c.token_count().unwrap(), c.depth), (256, 12));
        let r = ModelConfig::preset("retinopathy", Variant::Lsh).unwrap();
        assert_eq!((r.token_count().unwrap(), r.depth), (784, 8));
        assert!(r.attn.shared_qk && !c.attn.shared_qk);
        assert!(matches!(ModelConfig::preset("mnist", Variant::Dense), Err(crate::Error::Config(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Dense, Variant::Lsh] {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("sparse").is_err());
    }

    #[test]
    fn name_hash_distinguishes_layers() {
        assert_ne!(name_hash("blocks.1.attn.wq"), name_hash("blocks.10.attn.wq"));
    }
}
