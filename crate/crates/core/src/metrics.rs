//! Confusion-matrix segmentation metrics.

use crate::data::{LabelMap, IGNORE_LABEL};
use crate::error::{Error, Result};

/// `M×M` pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
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

    /// Adds one image. `pred` holds a class index per pixel; ignored labels are skipped.
    pub fn accumulate(&mut self, pred: &[usize], labels: &LabelMap) -> Result<()> {
        if pred.len() != labels.len() {
            return Err(Error::Shape {
                op: "confusion",
                lhs: vec![pred.len()],
                rhs: vec![labels.len()],
            });
        }
        let m = self.num_classes;
        for (p, (&guess, &truth)) in pred.iter().zip(labels.data()).enumerate() {
            if truth == IGNORE_LABEL {
                continue;
            }
            let truth = truth as usize;
            if truth >= m || guess >= m {
                return Err(Error::Data(format!(
                    "pixel {p}: class (truth {truth}, prediction {guess}) outside {m} classes"
                )));
            }
            self.counts[truth * m + guess] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class IoU; `None` where a class is absent from both truth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let m = self.num_classes;
        (0..m)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..m).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..m).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

pub fn confusion(pred: &[usize], labels: &LabelMap, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, labels)?;
    Ok(cm)
}

/// Mean IoU over classes with a non-zero denominator, and the per-class values.
pub fn miou(cm: &ConfusionMatrix) -> Result<(f64, Vec<Option<f64>>)> {
    let per_class = cm.class_iou();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Data("mIoU undefined: no class occurs".into()));
    }
    Ok((present.iter().sum::<f64>() / present.len() as f64, per_class))
}
