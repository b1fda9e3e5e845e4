//! Labeled image sets: CIFAR-10 record decoding, a synthetic two-class
//! generator, and flip/crop augmentation.
//!
//! Reading files is left to the caller; [`decode_cifar_records`] works on
//! bytes so it runs without `std`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Images `[N, C, H, W]` with values in `[0, 1]` and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl LabeledImageSet {
    pub fn new(images: Tensor<f64>, labels: Vec<usize>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let &[n, _, _, _] = images.shape() else {
            bail!(Dimension, "images must be [N, C, H, W], got {:?}", images.shape());
        };
        if labels.len() != n {
            bail!(Dimension, "{} labels for {} images", labels.len(), n);
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            bail!(Data, "label {} out of range for {} classes", l, class_names.len());
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            bail!(Data, "pixel values must lie in [0, 1]");
        }
        Ok(Self { images, labels, class_names, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers `indices` into a batch tensor of element type `T`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                bail!(Dimension, "index {} out of range for {} images", i, self.len());
            }
            data.extend(self.images.data()[i * per..(i + 1) * per].iter().map(|&v| T::from_f64(v)));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    /// The first `per_class` images of each class, in original order.
    pub fn balanced_subset(&self, per_class: usize) -> Result<Self> {
        let mut taken = vec![0usize; self.n_classes()];
        let mut keep = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if taken[l] < per_class {
                taken[l] += 1;
                keep.push(i);
            }
        }
        if let Some(c) = taken.iter().position(|&t| t < per_class) {
            bail!(Data, "class {} has only {} images, {} requested", c, taken[c], per_class);
        }
        let (images, labels) = self.batch::<f64>(&keep)?;
        Self::new(images, labels, self.class_names.clone(), self.split)
    }

    /// Images per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
/// One label byte followed by 3072 channel-major pixel bytes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: [&str; 10] =
    ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];
pub const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Decoded pixels (scaled to `[0, 1]`) and labels of a run of CIFAR-10 records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CifarRecords {
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

/// Decodes whole 3073-byte records. A trailing partial record is an
/// ingestion error at its byte offset; a label above 9 is a data error.
pub fn decode_cifar_records(bytes: &[u8]) -> Result<CifarRecords> {
    let whole = bytes.len() / CIFAR_RECORD;
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Ingestion {
            offset: (whole * CIFAR_RECORD) as u64,
            reason: alloc::format!(
                "truncated record: {} of {} bytes",
                bytes.len() % CIFAR_RECORD,
                CIFAR_RECORD
            ),
        });
    }
    let mut out = CifarRecords { pixels: Vec::with_capacity(whole * CIFAR_PIXELS), labels: Vec::with_capacity(whole) };
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES.len() {
            bail!(Data, "label byte {} at offset {} exceeds 9", label, r * CIFAR_RECORD);
        }
        out.labels.push(label);
        out.pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(out)
}

/// Builds a CIFAR-10 set from decoded records, optionally keeping the first
/// `subset_per_class` images of each class.
pub fn cifar_set(records: CifarRecords, split: Split, subset_per_class: Option<usize>) -> Result<LabeledImageSet> {
    let n = records.labels.len();
    let images = Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], records.pixels)?;
    let names = CIFAR_CLASSES.iter().map(|s| s.to_string()).collect();
    let set = LabeledImageSet::new(images, records.labels, names, split)?;
    match subset_per_class {
        Some(k) => set.balanced_subset(k),
        None => Ok(set),
    }
}

/// Per-pixel noise of [`synth_twoclass`].
pub const SYNTH_NOISE_STD: f64 = 0.1;

/// `n` images of shape `[C, H, W]`: class `i % 2`, drawn as `0.5 +/- (separation / 2) u`
/// plus Gaussian noise, clamped to `[0, 1]`. `u` is a fixed random sign pattern,
/// so the class means are `separation * sqrt(C H W)` apart before clamping.
pub fn synth_twoclass(n: usize, shape: [usize; 3], separation: f64, rng: &mut RngStream) -> Result<LabeledImageSet> {
    if n == 0 || !n.is_multiple_of(2) {
        bail!(Config, "synthetic set size {} must be even and positive", n);
    }
    let per: usize = shape.iter().product();
    let signs: Vec<f64> = (0..per).map(|_| if rng.bernoulli(0.5) { 1.0 } else { -1.0 }).collect();
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let dir = if label == 0 { 0.5 } else { -0.5 };
        for u in &signs {
            let v = 0.5 + dir * separation * u + SYNTH_NOISE_STD * rng.normal();
            data.push(v.clamp(0.0, 1.0));
        }
        labels.push(label);
    }
    let images = Tensor::new(&[n, shape[0], shape[1], shape[2]], data)?;
    LabeledImageSet::new(images, labels, vec!["a".into(), "b".into()], Split::Train)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub horizontal_flip_prob: f64,
    pub crop_padding: usize,
    pub enabled: bool,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self { horizontal_flip_prob: 0.0, crop_padding: 0, enabled: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            bail!(Config, "flip probability {} outside [0, 1]", self.horizontal_flip_prob);
        }
        Ok(())
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { horizontal_flip_prob: 0.5, crop_padding: 4, enabled: true }
    }
}

/// Per image: horizontal flip with the policy's probability, then a random
/// `H x W` window of the image zero-padded by `crop_padding`.
pub fn augment<T: Real>(batch: &Tensor<T>, policy: &AugmentPolicy, rng: &mut RngStream) -> Result<Tensor<T>> {
    policy.validate()?;
    let &[b, c, h, w] = batch.shape() else {
        bail!(Dimension, "augment expects [B, C, H, W], got {:?}", batch.shape());
    };
    if !policy.enabled {
        return Ok(batch.clone());
    }
    let pad = policy.crop_padding;
    let mut out = Tensor::zeros(batch.shape());
    let per = c * h * w;
    for i in 0..b {
        let flip = rng.bernoulli(policy.horizontal_flip_prob);
        let (dy, dx) = if pad > 0 { (rng.below(2 * pad + 1), rng.below(2 * pad + 1)) } else { (pad, pad) };
        let src = &batch.data()[i * per..(i + 1) * per];
        let dst = &mut out.data_mut()[i * per..(i + 1) * per];
        for ch in 0..c {
            for y in 0..h {
                let sy = (y + dy).wrapping_sub(pad);
                if sy >= h {
                    continue;
                }
                for x in 0..w {
                    let sx = (x + dx).wrapping_sub(pad);
                    if sx >= w {
                        continue;
                    }
                    let sx = if flip { w - 1 - sx } else { sx };
                    dst[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR_RECORD];
        r[0] = label;
        r
    }

    #[test]
    fn decodes_hand_built_record() {
        let mut bytes = record(7, 255);
        bytes.extend(record(2, 0));
        let d = decode_cifar_records(&bytes).unwrap();
        assert_eq!(d.labels, vec![7, 2]);
        assert!(d.pixels[..CIFAR_PIXELS].iter().all(|&v| v == 1.0));
        assert!(d.pixels[CIFAR_PIXELS..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_major_layout() {
        let mut r = record(0, 0);
        // Green channel, row 1, column 2.
        r[1 + 1024 + 32 + 2] = 51;
        let set = cifar_set(decode_cifar_records(&r).unwrap(), Split::Train, None).unwrap();
        let idx = (32 + 1) * 32 + 2;
        assert_eq!(set.images.data()[idx], 0.2);
        assert_eq!(set.images.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn truncation_and_bad_label() {
        let mut bytes = record(1, 3);
        bytes.extend(&record(1, 3)[..100]);
        assert_eq!(
            decode_cifar_records(&bytes).unwrap_err(),
            Error::Ingestion { offset: CIFAR_RECORD as u64, reason: "truncated record: 100 of 3073 bytes".into() }
        );
        assert!(matches!(decode_cifar_records(&record(10, 0)), Err(Error::Data(_))));
    }

    #[test]
    fn subset_is_balanced_and_in_file_order() {
        let mut bytes = Vec::new();
        for i in 0..40u8 {
            bytes.extend(record(i % 10, i));
        }
        let set = cifar_set(decode_cifar_records(&bytes).unwrap(), Split::Train, Some(3)).unwrap();
        assert_eq!(set.len(), 30);
        assert_eq!(set.class_counts(), vec![3; 10]);
        assert_eq!(set.images.data()[0], 0.0);
        assert_eq!(set.images.data()[10 * CIFAR_PIXELS], 10.0 / 255.0);
        assert!(matches!(set.balanced_subset(4), Err(Error::Data(_))));
    }

    #[test]
    fn synthetic_is_reproducible() {
        let a = synth_twoclass(10, [1, 4, 4], 0.4, &mut RngStream::new(9)).unwrap();
        let b = synth_twoclass(10, [1, 4, 4], 0.4, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![5, 5]);
        assert!(synth_twoclass(7, [1, 4, 4], 0.4, &mut RngStream::new(9)).is_err());
    }

    #[test]
    fn flip_moves_hot_pixel() {
        let (h, w) = (3, 5);
        let mut img = Tensor::<f64>::zeros(&[1, 1, h, w]);
        img.data_mut()[w + 1] = 1.0;
        let forced = AugmentPolicy { horizontal_flip_prob: 1.0, crop_padding: 0, enabled: true };
        let mut rng = RngStream::new(1);
        let out = augment(&img, &forced, &mut rng).unwrap();
        assert_eq!(out.data()[w + (w - 1 - 1)], 1.0);
        assert_eq!(out.sum(), 1.0);
        assert_eq!(augment(&out, &forced, &mut rng).unwrap(), img);
        let off = AugmentPolicy { horizontal_flip_prob: 0.0, crop_padding: 0, enabled: true };
        assert_eq!(augment(&img, &off, &mut rng).unwrap(), img);
    }

    #[test]
    fn crop_is_a_shifted_window() {
        let mut rng = RngStream::new(4);
        let img = Tensor::from_fn(&[3, 2, 6, 6], |i| (i % 97) as f64 + 1.0);
        let p = AugmentPolicy { horizontal_flip_prob: 0.0, crop_padding: 2, enabled: true };
        let out = augment(&img, &p, &mut rng).unwrap();
        assert_eq!(out.shape(), img.shape());
        // Every nonzero output value appears in the source image at a shift of at most 2.
        for b in 0..3 {
            for ch in 0..2 {
                for y in 0..6usize {
                    for x in 0..6usize {
                        let v = out.data()[((b * 2 + ch) * 6 + y) * 6 + x];
                        if v == 0.0 {
                            continue;
                        }
                        let found = (y.saturating_sub(2)..(y + 3).min(6)).any(|sy| {
                            (x.saturating_sub(2)..(x + 3).min(6))
                                .any(|sx| img.data()[((b * 2 + ch) * 6 + sy) * 6 + sx] == v)
                        });
                        assert!(found);
                    }
                }
            }
        }
    }
}
