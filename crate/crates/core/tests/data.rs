use visreformer_core::data::{augment, synth_twoclass, AugmentPolicy, LabeledImageSet};
use visreformer_core::{RngStream, Tensor};

/// Fits class means on `train` and reports nearest-centroid accuracy on `test`.
fn centroid_accuracy(train: &LabeledImageSet, test: &LabeledImageSet) -> f64 {
    let dim: usize = train.image_shape().iter().product();
    let mut sums = vec![vec![0.0; dim]; 2];
    let mut counts = [0usize; 2];
    for (i, &y) in train.labels.iter().enumerate() {
        let img = &train.images.data()[i * dim..(i + 1) * dim];
        sums[y].iter_mut().zip(img).for_each(|(s, v)| *s += v);
        counts[y] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let correct = test
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let img = &test.images.data()[i * dim..(i + 1) * dim];
            let pred = if dist(img, &sums[0]) <= dist(img, &sums[1]) { 0 } else { 1 };
            pred == y
        })
        .count();
    correct as f64 / test.len() as f64
}

/// The first `k` samples and the rest; both halves share the class patterns.
fn split(set: LabeledImageSet, k: usize) -> (LabeledImageSet, LabeledImageSet) {
    let part = |idx: Vec<usize>| {
        let (images, labels) = set.batch::<f64>(&idx).unwrap();
        LabeledImageSet::new(images, labels, set.class_names.clone(), set.split).unwrap()
    };
    (part((0..k).collect()), part((k..set.len()).collect()))
}

#[test]
fn large_separation_is_centroid_separable() {
    let (train, test) = split(synth_twoclass(600, [3, 8, 8], 0.5, &mut RngStream::new(1)).unwrap(), 200);
    assert!(centroid_accuracy(&train, &test) >= 0.99);
    assert_eq!(train.class_counts(), vec![100, 100]);
}

#[test]
fn zero_separation_is_chance() {
    let (train, test) = split(synth_twoclass(2400, [3, 8, 8], 0.0, &mut RngStream::new(3)).unwrap(), 400);
    let acc = centroid_accuracy(&train, &test);
    assert!((0.45..=0.55).contains(&acc), "{acc}");
}

#[test]
fn augmentation_keeps_shape_and_range() {
    let set = synth_twoclass(8, [3, 6, 6], 0.4, &mut RngStream::new(5)).unwrap();
    let (batch, labels) = set.batch::<f64>(&(0..8).collect::<Vec<_>>()).unwrap();
    let out = augment(&batch, &AugmentPolicy::default(), &mut RngStream::new(6)).unwrap();
    assert_eq!(out.shape(), batch.shape());
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(labels, set.labels);

    let identity = AugmentPolicy { horizontal_flip_prob: 0.0, crop_padding: 0, enabled: true };
    assert_eq!(augment(&batch, &identity, &mut RngStream::new(7)).unwrap(), batch);
    assert_eq!(augment(&batch, &AugmentPolicy::none(), &mut RngStream::new(7)).unwrap(), batch);

    let flip = AugmentPolicy { horizontal_flip_prob: 1.0, crop_padding: 0, enabled: true };
    let twice = augment(&augment(&batch, &flip, &mut RngStream::new(8)).unwrap(), &flip, &mut RngStream::new(9)).unwrap();
    assert_eq!(twice, batch);
}

#[test]
fn flip_mirrors_columns() {
    let img = Tensor::<f64>::from_fn(&[1, 1, 2, 3], |i| i as f64 / 10.0);
    let flip = AugmentPolicy { horizontal_flip_prob: 1.0, crop_padding: 0, enabled: true };
    let out = augment(&img, &flip, &mut RngStream::new(0)).unwrap();
    assert_eq!(out.data(), &[0.2, 0.1, 0.0, 0.5, 0.4, 0.3]);
}
