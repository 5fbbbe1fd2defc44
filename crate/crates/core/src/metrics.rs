//! Confusion-matrix accumulation and intersection-over-union scores.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction has {pred} pixels but ground truth has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("class {value} out of range for {num_classes} classes")]
    ClassOutOfRange { value: usize, num_classes: usize },
    #[error("{0}")]
    Incompatible(String),
}

/// `counts[truth * C + pred]`: rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel. Nothing is recorded if any value is invalid.
    pub fn update(&mut self, pred: &[u8], truth: &[u8]) -> Result<(), MetricsError> {
        if pred.len() != truth.len() {
            return Err(MetricsError::LengthMismatch {
                pred: pred.len(),
                truth: truth.len(),
            });
        }
        let c = self.num_classes;
        if let Some(&bad) = pred.iter().chain(truth).find(|&&v| v as usize >= c) {
            return Err(MetricsError::ClassOutOfRange {
                value: bad as usize,
                num_classes: c,
            });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if other.num_classes != self.num_classes {
            return Err(MetricsError::Incompatible(format!(
                "cannot merge {} classes into {}",
                other.num_classes, self.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.num_classes..(c + 1) * self.num_classes]
            .iter()
            .sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|r| self.get(r, c)).sum()
    }

    /// `TP / (TP + FP + FN)` per class; `None` where the denominator is zero.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fp = self.col_sum(c) - tp;
                let fn_ = self.row_sum(c) - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in the ground truth.
    pub fn miou(&self) -> Option<f64> {
        let ious = self.iou_per_class();
        let present: Vec<f64> = (0..self.num_classes)
            .filter(|&c| self.row_sum(c) > 0)
            .filter_map(|c| ious[c])
            .collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }
}
