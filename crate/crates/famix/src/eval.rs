//! Segmentation metrics: confusion matrices, per-class IoU and run summaries.

use crate::stats::LabelMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction is {pred_h}x{pred_w} but ground truth is {gt_h}x{gt_w}")]
    ShapeMismatch {
        pred_h: usize,
        pred_w: usize,
        gt_h: usize,
        gt_w: usize,
    },
    #[error("prediction value {value} outside {num_classes} classes")]
    PredOutOfRange { value: u32, num_classes: usize },
    #[error("metric undefined: confusion matrix has no counted pixels")]
    EmptyMatrix,
    #[error("cannot summarize zero runs")]
    NoRuns,
    #[error("confusion matrices have different class counts: {left} vs {right}")]
    ClassCountMismatch { left: usize, right: usize },
}

/// K x K counts indexed (ground truth, prediction); ignore pixels never land
/// in the matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
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

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image pair; `cm[gt][pred] += 1` per non-ignore pixel.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<(), EvalError> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(EvalError::ShapeMismatch {
                pred_h: pred.height(),
                pred_w: pred.width(),
                gt_h: gt.height(),
                gt_w: gt.width(),
            });
        }
        for (p, g) in pred.data().iter().zip(gt.data().iter()) {
            if *g == gt.ignore_index() {
                continue;
            }
            let (g, p) = (*g as usize, *p as usize);
            if p >= self.num_classes {
                return Err(EvalError::PredOutOfRange {
                    value: p as u32,
                    num_classes: self.num_classes,
                });
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Associative, commutative sum; lets per-image matrices merge in any order.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), EvalError> {
        if self.num_classes != other.num_classes {
            return Err(EvalError::ClassCountMismatch {
                left: self.num_classes,
                right: other.num_classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// What to do with classes whose union is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroUnionPolicy {
    /// Leave absent classes out of the mean (the standard protocol).
    #[default]
    Exclude,
    /// Count absent classes as IoU zero; useful for oracle comparisons.
    CountAsZero,
}

/// Per-class IoU plus their mean over classes with nonzero union.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` marks a class absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub counted_pixels: u64,
}

/// IoU_k = TP / (TP + FP + FN); the mean skips or zeroes absent classes
/// according to `policy`.
pub fn miou(cm: &ConfusionMatrix, policy: ZeroUnionPolicy) -> Result<EvalReport, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let k = cm.num_classes();
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut denom = 0usize;
    for c in 0..k {
        let tp = cm.count(c, c);
        let fp: u64 = (0..k).filter(|&g| g != c).map(|g| cm.count(g, c)).sum();
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.count(c, p)).sum();
        let union = tp + fp + fn_;
        if union == 0 {
            match policy {
                ZeroUnionPolicy::Exclude => per_class.push(None),
                ZeroUnionPolicy::CountAsZero => {
                    per_class.push(Some(0.0));
                    denom += 1;
                }
            }
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            denom += 1;
        }
    }
    if denom == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    Ok(EvalReport {
        per_class_iou: per_class,
        miou: sum / denom as f64,
        counted_pixels: cm.total(),
    })
}

/// Mean and sample standard deviation over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub mean_miou: f64,
    pub std_miou: f64,
    /// Set when only one run was summarized; std is reported as zero.
    pub single_run: bool,
    pub per_class_mean: Vec<Option<f64>>,
}

pub fn multi_run_summary(reports: &[EvalReport]) -> Result<RunSummary, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let n = reports.len();
    let mean = reports.iter().map(|r| r.miou).sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        let var = reports
            .iter()
            .map(|r| (r.miou - mean) * (r.miou - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        var.sqrt()
    };
    let k = reports[0].per_class_iou.len();
    let mut per_class_mean = Vec::with_capacity(k);
    for c in 0..k {
        let values: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.per_class_iou.get(c).copied().flatten())
            .collect();
        if values.is_empty() {
            per_class_mean.push(None);
        } else {
            per_class_mean.push(Some(values.iter().sum::<f64>() / values.len() as f64));
        }
    }
    Ok(RunSummary {
        runs: n,
        mean_miou: mean,
        std_miou: std,
        single_run: n == 1,
        per_class_mean,
    })
}
