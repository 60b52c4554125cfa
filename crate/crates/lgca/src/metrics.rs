//! Confusion-matrix evaluation: per-class IoU, accuracy and F1, with
//! unweighted means over the classes present in ground truth.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::IGNORE;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("class value {0} outside 0..{1}")]
    OutOfRange(i64, usize),
    #[error("prediction {pred:?} and target {target:?} shapes differ")]
    ShapeMismatch {
        pred: (usize, usize),
        target: (usize, usize),
    },
    #[error("cannot merge confusion matrices of {0} and {1} classes")]
    SizeMismatch(usize, usize),
}

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: Array2::zeros((classes, classes)),
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[[truth, pred]]
    }

    /// Total scored (non-ignored) pixels.
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Scores one prediction/target pair; ignored target pixels are skipped,
    /// out-of-range classes are an error.
    pub fn accumulate(
        &mut self,
        pred: &Array2<i64>,
        target: &Array2<i64>,
    ) -> Result<(), MetricsError> {
        if pred.dim() != target.dim() {
            return Err(MetricsError::ShapeMismatch {
                pred: pred.dim(),
                target: target.dim(),
            });
        }
        for (&p, &t) in pred.iter().zip(target.iter()) {
            if t == IGNORE {
                continue;
            }
            let k = self.classes;
            if !(0..k as i64).contains(&t) {
                return Err(MetricsError::OutOfRange(t, k));
            }
            if !(0..k as i64).contains(&p) {
                return Err(MetricsError::OutOfRange(p, k));
            }
            self.counts[[t as usize, p as usize]] += 1;
        }
        Ok(())
    }

    /// Commutative, associative merge of partial matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.classes != other.classes {
            return Err(MetricsError::SizeMismatch(self.classes, other.classes));
        }
        self.counts += &other.counts;
        Ok(())
    }

    fn tp(&self, i: usize) -> u64 {
        self.counts[[i, i]]
    }

    fn fp(&self, i: usize) -> u64 {
        (0..self.classes).filter(|&t| t != i).map(|t| self.counts[[t, i]]).sum()
    }

    fn fn_(&self, i: usize) -> u64 {
        (0..self.classes).filter(|&p| p != i).map(|p| self.counts[[i, p]]).sum()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    /// Pixels of this class in ground truth.
    pub support: u64,
    /// `None` when the class is absent from both ground truth and
    /// predictions (reported but excluded from the means).
    pub iou: Option<f64>,
    pub acc: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_iou: f64,
    pub mean_acc: f64,
    pub mean_f1: f64,
    pub scored_pixels: u64,
    /// Classes absent from ground truth, excluded from the means.
    pub excluded_classes: Vec<usize>,
}

impl MetricsReport {
    pub fn summary_line(&self) -> String {
        format!(
            "mIoU {:.4}  mAcc {:.4}  mF1 {:.4}  ({} px scored)",
            self.mean_iou, self.mean_acc, self.mean_f1, self.scored_pixels
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<MetricsReport, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Computes the report. Per-class ratios follow the usual definitions
/// (IoU = TP/(TP+FP+FN), Acc = TP/(TP+FN), F1 = harmonic precision/recall
/// mean); means run unweighted over classes present in ground truth.
pub fn metrics(cm: &ConfusionMatrix, class_names: &[String]) -> MetricsReport {
    let k = cm.classes();
    let mut per_class = Vec::with_capacity(k);
    let mut sums = (0.0, 0.0, 0.0);
    let mut present = 0usize;
    let mut excluded = Vec::new();
    for i in 0..k {
        let (tp, fp, fnn) = (cm.tp(i) as f64, cm.fp(i) as f64, cm.fn_(i) as f64);
        let support = cm.tp(i) + cm.fn_(i);
        let name = class_names
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("class{i}"));
        if support == 0 && fp == 0.0 {
            excluded.push(i);
            per_class.push(ClassMetrics {
                class: i,
                name,
                support,
                iou: None,
                acc: None,
                f1: None,
            });
            continue;
        }
        let iou = if tp + fp + fnn > 0.0 { tp / (tp + fp + fnn) } else { 0.0 };
        let acc = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = acc;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            class: i,
            name,
            support,
            iou: Some(iou),
            acc: Some(acc),
            f1: Some(f1),
        });
        // Means cover classes present in ground truth only.
        if support > 0 {
            sums.0 += iou;
            sums.1 += acc;
            sums.2 += f1;
            present += 1;
        } else {
            excluded.push(i);
        }
    }
    let n = present.max(1) as f64;
    MetricsReport {
        per_class,
        mean_iou: sums.0 / n,
        mean_acc: sums.1 / n,
        mean_f1: sums.2 / n,
        scored_pixels: cm.total(),
        excluded_classes: excluded,
    }
}
