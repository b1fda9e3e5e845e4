//! Classification metrics from a confusion matrix.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self { counts: vec![vec![0; n_classes]; n_classes] }
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize], n_classes: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            bail!(Dimension, "{} labels but {} predictions", labels.len(), predictions.len());
        }
        let mut m = Self::new(n_classes);
        for (&t, &p) in labels.iter().zip(predictions) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let c = self.n_classes();
        if truth >= c || predicted >= c {
            bail!(Data, "label {} or prediction {} out of range for {} classes", truth, predicted, c);
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    /// Mean cross-entropy over the evaluated samples, when known.
    pub loss: Option<f64>,
    /// Seconds spent on the epoch, when timed.
    pub epoch_time_s: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Per-class precision is 0 for a class never predicted; F1 is 0 when
    /// precision and recall are both 0. Macro means average only classes that
    /// occur in the ground truth.
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let c = confusion.n_classes();
        let support: Vec<u64> = confusion.counts.iter().map(|r| r.iter().sum()).collect();
        let predicted: Vec<u64> = (0..c).map(|j| confusion.counts.iter().map(|r| r[j]).sum()).collect();
        let mut precision = Vec::with_capacity(c);
        let mut recall = Vec::with_capacity(c);
        let mut f1 = Vec::with_capacity(c);
        for i in 0..c {
            let tp = confusion.counts[i][i];
            let p = ratio(tp, predicted[i]);
            let r = ratio(tp, support[i]);
            precision.push(p);
            recall.push(r);
            f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
        }
        let present: Vec<usize> = (0..c).filter(|&i| support[i] > 0).collect();
        let mean = |v: &[f64]| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|&i| v[i]).sum::<f64>() / present.len() as f64
            }
        };
        Self {
            accuracy: ratio(confusion.trace(), confusion.total()),
            macro_precision: mean(&precision),
            macro_recall: mean(&recall),
            macro_f1: mean(&f1),
            precision,
            recall,
            f1,
            confusion,
            loss: None,
            epoch_time_s: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_symmetric() {
        let m = ConfusionMatrix::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        let r = MetricsReport::from_confusion(m);
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));

        let r = MetricsReport::from_confusion(ConfusionMatrix { counts: vec![vec![1, 1], vec![1, 1]] });
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.precision, vec![0.5, 0.5]);
        assert_eq!(r.recall, vec![0.5, 0.5]);
        assert_eq!(r.f1, vec![0.5, 0.5]);
        assert_eq!(r.macro_f1, 0.5);
    }

    #[test]
    fn out_of_range_is_data_error() {
        assert!(matches!(ConfusionMatrix::from_predictions(&[3], &[0], 3), Err(crate::Error::Data(_))));
    }
}
