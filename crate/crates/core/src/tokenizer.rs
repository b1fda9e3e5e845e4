//! Images to token sequences: convolutional stem, patch projection, positions.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::SeqLayout;
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Input image channels.
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub stem_channels: usize,
    /// Side of the square stem kernels; odd so that same-padding keeps H and W.
    pub stem_kernel: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        token_count(self.image_height, self.image_width, self.patch_size)?;
        if self.embed_dim == 0 || self.channels == 0 || self.stem_channels == 0 {
            bail!(Config, "embed dim, channels and stem channels must be positive");
        }
        if self.stem_kernel.is_multiple_of(2) {
            bail!(Config, "stem kernel {} must be odd to preserve spatial size", self.stem_kernel);
        }
        Ok(())
    }

    pub fn token_count(&self) -> Result<usize> {
        token_count(self.image_height, self.image_width, self.patch_size)
    }

    /// Width of one flattened patch after the stem.
    pub fn patch_features(&self) -> usize {
        self.stem_channels * self.patch_size * self.patch_size
    }
}

/// Number of non-overlapping `P x P` patches in an `H x W` image.
pub fn token_count(height: usize, width: usize, patch: usize) -> Result<usize> {
    if patch == 0 {
        bail!(Config, "patch size must be positive");
    }
    if !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        bail!(Config, "patch size {} does not divide {}x{}", patch, height, width);
    }
    Ok((height / patch) * (width / patch))
}

/// A batch of token embeddings with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T: Real = f64> {
    /// `[B, n, D]`.
    pub tokens: Tensor<T>,
    /// `B * n` flags; `false` marks padding.
    pub mask: Vec<bool>,
}

impl<T: Real> TokenSequence<T> {
    pub fn new(tokens: Tensor<T>, mask: Vec<bool>) -> Result<Self> {
        let &[b, n, _] = tokens.shape() else {
            bail!(Dimension, "token sequence must be [B, n, D], got {:?}", tokens.shape());
        };
        if mask.len() != b * n {
            bail!(Dimension, "mask has {} entries for {}x{} tokens", mask.len(), b, n);
        }
        Ok(Self { tokens, mask })
    }

    /// Sequence with every token valid.
    pub fn unmasked(tokens: Tensor<T>) -> Result<Self> {
        let len = tokens.shape().iter().take(2).product();
        Self::new(tokens, vec![true; len])
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn layout(&self) -> SeqLayout {
        SeqLayout { batch: self.batch(), tokens: self.len(), mask: self.mask.clone() }
    }

    /// Tokens as a `[B * n, D]` matrix.
    pub fn rows(&self) -> Result<Tensor<T>> {
        self.tokens.clone().reshape(&[self.batch() * self.len(), self.dim()])
    }

    /// Same mask with new `[B * n, D']` rows.
    pub fn with_rows(&self, rows: Tensor<T>) -> Result<Self> {
        let (_, d) = rows.dims2()?;
        Self::new(rows.reshape(&[self.batch(), self.len(), d])?, self.mask.clone())
    }
}

/// Learned absolute positional rows, added to tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding<T: Real = f64> {
    /// `[n_max, D]`.
    pub table: Tensor<T>,
}

/// Two same-padding convolutions with a GELU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct StemParams<T: Real = f64> {
    pub conv1_weight: Tensor<T>,
    pub conv1_bias: Tensor<T>,
    pub conv2_weight: Tensor<T>,
    pub conv2_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchProjection<T: Real = f64> {
    /// `[stem_channels * P * P, D]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct StemVars {
    pub conv1_weight: Var,
    pub conv1_bias: Var,
    pub conv2_weight: Var,
    pub conv2_bias: Var,
}

impl<T: Real> StemParams<T> {
    pub fn bind(&self, g: &mut Graph<T>) -> StemVars {
        StemVars {
            conv1_weight: g.param(self.conv1_weight.clone()),
            conv1_bias: g.param(self.conv1_bias.clone()),
            conv2_weight: g.param(self.conv2_weight.clone()),
            conv2_bias: g.param(self.conv2_bias.clone()),
        }
    }
}

pub fn stem_graph<T: Real>(g: &mut Graph<T>, images: Var, cfg: &PatchConfig, w: &StemVars) -> Result<Var> {
    let pad = cfg.stem_kernel / 2;
    let h = g.conv2d(images, w.conv1_weight, 1, pad)?;
    let h = g.add_channel_bias(h, w.conv1_bias)?;
    let h = g.gelu(h)?;
    let h = g.conv2d(h, w.conv2_weight, 1, pad)?;
    g.add_channel_bias(h, w.conv2_bias)
}

/// Patchify then project: `[B, C, H, W]` to `[B * n, D]`.
pub fn patch_embed_graph<T: Real>(g: &mut Graph<T>, features: Var, cfg: &PatchConfig, weight: Var, bias: Var) -> Result<Var> {
    let p = g.patchify(features, cfg.patch_size)?;
    g.linear(p, weight, Some(bias))
}

/// Checks `images` is `[B, channels, H, W]` with the configured `H` and `W`.
pub fn check_images<T: Real>(images: &Tensor<T>, cfg: &PatchConfig, channels: usize) -> Result<()> {
    match images.shape() {
        &[_, c, h, w] if c == channels && h == cfg.image_height && w == cfg.image_width => Ok(()),
        s => bail!(
            Config,
            "images {:?} do not match [B, {}, {}, {}]",
            s,
            channels,
            cfg.image_height,
            cfg.image_width
        ),
    }
}

/// Applies the stem; output keeps the input's height and width.
pub fn conv_stem<T: Real>(images: &Tensor<T>, cfg: &PatchConfig, params: &StemParams<T>) -> Result<Tensor<T>> {
    cfg.validate()?;
    check_images(images, cfg, cfg.channels)?;
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let w = params.bind(&mut g);
    let y = stem_graph(&mut g, x, cfg, &w)?;
    Ok(g.value(y).clone().with_requires_grad(false))
}

/// Flattens each `P x P` block of `features: [B, C, H, W]` and projects it to `D`.
pub fn patchify_project<T: Real>(
    features: &Tensor<T>,
    cfg: &PatchConfig,
    proj: &PatchProjection<T>,
) -> Result<TokenSequence<T>> {
    let &[b, c, _, _] = features.shape() else {
        bail!(Dimension, "features must be [B, C, H, W], got {:?}", features.shape());
    };
    check_images(features, cfg, c)?;
    let n = cfg.token_count()?;
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let w = g.constant(proj.weight.clone());
    let bias = g.constant(proj.bias.clone());
    let y = patch_embed_graph(&mut g, x, cfg, w, bias)?;
    let d = g.value(y).dims2()?.1;
    TokenSequence::unmasked(g.value(y).clone().reshape(&[b, n, d])?)
}

/// Adds `table[l]` to token `l` of every item; the mask is untouched.
pub fn add_positions<T: Real>(seq: &TokenSequence<T>, enc: &PositionalEncoding<T>) -> Result<TokenSequence<T>> {
    let mut g = Graph::new();
    let x = g.constant(seq.rows()?);
    let t = g.constant(enc.table.clone());
    let y = g.add_positions(x, t, seq.len())?;
    seq.with_rows(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng::RngStream;

    fn cfg(h: usize, w: usize, p: usize, d: usize, c: usize) -> PatchConfig {
        PatchConfig {
            image_height: h,
            image_width: w,
            channels: 3,
            patch_size: p,
            embed_dim: d,
            stem_channels: c,
            stem_kernel: 3,
        }
    }

    #[test]
    fn token_counts() {
        assert_eq!(token_count(32, 32, 2).unwrap(), 256);
        assert_eq!(token_count(224, 224, 14).unwrap(), 256);
        assert_eq!(token_count(560, 560, 20).unwrap(), 784);
        assert_eq!(token_count(7, 7, 7).unwrap(), 1);
        assert!(matches!(token_count(32, 30, 4), Err(Error::Config(_))));
        assert!(matches!(token_count(32, 32, 0), Err(Error::Config(_))));
    }

    fn stem_params(rng: &mut RngStream, c: usize, s: usize, k: usize) -> StemParams {
        StemParams {
            conv1_weight: rng.normal_tensor(&[s, c, k, k], 0.3),
            conv1_bias: rng.normal_tensor(&[s], 0.1),
            conv2_weight: rng.normal_tensor(&[s, s, k, k], 0.3),
            conv2_bias: rng.normal_tensor(&[s], 0.1),
        }
    }

    #[test]
    fn identity_stem_is_pointwise_gelu() {
        let mut c = cfg(4, 4, 2, 5, 3);
        c.stem_kernel = 1;
        let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let params = StemParams {
            conv1_weight: eye.clone(),
            conv1_bias: Tensor::zeros(&[3]),
            conv2_weight: eye,
            conv2_bias: Tensor::zeros(&[3]),
        };
        let img = RngStream::new(1).normal_tensor::<f64>(&[2, 3, 4, 4], 1.0);
        let out = conv_stem(&img, &c, &params).unwrap();
        let want = img.map(|x| 0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2)));
        assert!(out.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn averaging_stem_keeps_constant_interior() {
        let mut c = cfg(8, 8, 2, 4, 1);
        c.channels = 1;
        let avg = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        // Second layer averages the GELU of a constant: still constant in the interior.
        let params = StemParams {
            conv1_weight: avg.clone(),
            conv1_bias: Tensor::zeros(&[1]),
            conv2_weight: avg,
            conv2_bias: Tensor::zeros(&[1]),
        };
        let img = Tensor::full(&[1, 1, 8, 8], 0.6);
        let out = conv_stem(&img, &c, &params).unwrap();
        let g = 0.5 * 0.6 * (1.0 + libm::erf(0.6 / core::f64::consts::SQRT_2));
        for y in 2..6 {
            for x in 2..6 {
                assert!((out.data()[y * 8 + x] - g).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn stem_preserves_spatial_shape() {
        let c = cfg(12, 8, 4, 6, 5);
        let mut rng = RngStream::new(2);
        let p = stem_params(&mut rng, 3, 5, 3);
        let img = rng.normal_tensor::<f64>(&[3, 3, 12, 8], 1.0);
        assert_eq!(conv_stem(&img, &c, &p).unwrap().shape(), &[3, 5, 12, 8]);
        let wrong = rng.normal_tensor::<f64>(&[1, 3, 8, 8], 1.0);
        assert!(matches!(conv_stem(&wrong, &c, &p), Err(Error::Config(_))));
    }

    #[test]
    fn whole_image_patch_is_single_token() {
        let c = cfg(4, 4, 4, 3, 2);
        let mut rng = RngStream::new(3);
        let feats = rng.normal_tensor::<f64>(&[1, 2, 4, 4], 1.0);
        let proj = PatchProjection { weight: rng.normal_tensor(&[32, 3], 1.0), bias: rng.normal_tensor(&[3], 1.0) };
        let seq = patchify_project(&feats, &c, &proj).unwrap();
        assert_eq!(seq.tokens.shape(), &[1, 1, 3]);
        let flat = feats.clone().reshape(&[1, 32]).unwrap();
        let want = crate::tensor::matmul(&flat, &proj.weight).unwrap();
        for j in 0..3 {
            assert!((seq.tokens.data()[j] - want.data()[j] - proj.bias.data()[j]).abs() < 1e-13);
        }
    }

    #[test]
    fn painted_patches_come_out_row_major() {
        // Each 2x2 patch of a 1-channel 6x4 image is painted with its own constant.
        let (h, w, p) = (6, 4, 2);
        let mut c = cfg(h, w, p, 1, 1);
        c.channels = 1;
        let gw = w / p;
        let img = Tensor::from_fn(&[1, 1, h, w], |i| {
            let (y, x) = (i / w, i % w);
            ((y / p) * gw + x / p) as f64 + 10.0
        });
        // Projection picks the first pixel of the patch.
        let mut weight = Tensor::zeros(&[4, 1]);
        weight.data_mut()[0] = 1.0;
        let proj = PatchProjection { weight, bias: Tensor::zeros(&[1]) };
        let seq = patchify_project(&img, &c, &proj).unwrap();
        let got: Vec<f64> = seq.tokens.data().to_vec();
        let want: Vec<f64> = (0..6).map(|l| l as f64 + 10.0).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn patch_edit_changes_only_its_token() {
        let c = cfg(4, 4, 2, 3, 2);
        let mut rng = RngStream::new(4);
        let feats = rng.normal_tensor::<f64>(&[1, 2, 4, 4], 1.0);
        let proj = PatchProjection { weight: rng.normal_tensor(&[8, 3], 1.0), bias: Tensor::zeros(&[3]) };
        let base = patchify_project(&feats, &c, &proj).unwrap();
        let mut edited = feats.clone();
        // Swap two pixels inside patch (0, 1): rows 0-1, cols 2-3 of channel 1.
        edited.data_mut().swap(16 + 2, 16 + 4 + 3);
        let other = patchify_project(&edited, &c, &proj).unwrap();
        for t in 0..4 {
            let a = &base.tokens.data()[t * 3..t * 3 + 3];
            let b = &other.tokens.data()[t * 3..t * 3 + 3];
            assert_eq!(a == b, t != 1, "token {t}");
        }
    }

    #[test]
    fn positions_add_and_round_trip() {
        let mut rng = RngStream::new(5);
        let seq = TokenSequence::unmasked(rng.normal_tensor::<f64>(&[2, 3, 4], 1.0)).unwrap();
        let zero = PositionalEncoding { table: Tensor::zeros(&[5, 4]) };
        assert_eq!(add_positions(&seq, &zero).unwrap(), seq);

        let table = rng.normal_tensor::<f64>(&[5, 4], 1.0);
        let enc = PositionalEncoding { table: table.clone() };
        let zs = TokenSequence::unmasked(Tensor::zeros(&[2, 3, 4])).unwrap();
        let out = add_positions(&zs, &enc).unwrap();
        for b in 0..2 {
            assert_eq!(&out.tokens.data()[b * 12..b * 12 + 12], &table.data()[..12]);
        }

        let added = add_positions(&seq, &enc).unwrap();
        let back = Tensor::from_fn(&[2, 3, 4], |i| added.tokens.data()[i] - table.data()[i % 12]);
        assert!(back.max_abs_diff(&seq.tokens).unwrap() < 1e-15);

        let short = PositionalEncoding { table: Tensor::zeros(&[2, 4]) };
        assert!(matches!(add_positions(&seq, &short), Err(Error::Config(_))));
    }
}
