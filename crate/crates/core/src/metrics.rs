//! Temporal IoU, `R@n, IoU=m` recall and mean IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::MomentBoundary;

/// Overlap over union of two inclusive frame spans.
pub fn temporal_iou(a: &MomentBoundary, b: &MomentBoundary) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Fraction of samples where one of the first `n` predictions has IoU
/// strictly greater than `m` with the truth.
pub fn recall_at(predictions: &[Vec<MomentBoundary>], truths: &[MomentBoundary], n: usize, m: f64) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            expected: truths.len(),
            actual: predictions.len(),
        });
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(preds, truth)| preds.iter().take(n).any(|p| temporal_iou(p, truth) > m))
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

pub fn mean_iou(top1: &[MomentBoundary], truths: &[MomentBoundary]) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if top1.len() != truths.len() {
        return Err(Error::LengthMismatch {
            expected: truths.len(),
            actual: top1.len(),
        });
    }
    let total: f64 = top1.iter().zip(truths).map(|(p, t)| temporal_iou(p, t)).sum();
    Ok(total / truths.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub n: usize,
    pub iou: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub threshold: f64,
    pub recall: Vec<RecallEntry>,
    pub miou: f64,
}

impl MetricsReport {
    /// Computes every `(n, m)` recall plus mIoU of the first prediction.
    pub fn compute(
        predictions: &[Vec<MomentBoundary>],
        truths: &[MomentBoundary],
        top_n: &[usize],
        ious: &[f64],
        threshold: f64,
    ) -> Result<Self> {
        let mut recall = Vec::with_capacity(top_n.len() * ious.len());
        for &n in top_n {
            for &m in ious {
                recall.push(RecallEntry {
                    n,
                    iou: m,
                    recall: recall_at(predictions, truths, n, m)?,
                });
            }
        }
        let top1 = predictions
            .iter()
            .map(|p| p.first().copied().ok_or(Error::Empty("prediction list")))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport {
            samples: truths.len(),
            threshold,
            recall,
            miou: mean_iou(&top1, truths)?,
        })
    }

    pub fn recall_for(&self, n: usize, iou: f64) -> Option<f64> {
        self.recall.iter().find(|e| e.n == n && e.iou == iou).map(|e| e.recall)
    }

    /// Recall is non-increasing in `m` for fixed `n` and non-decreasing in
    /// `n` for fixed `m`.
    pub fn is_monotone(&self) -> bool {
        self.recall.iter().all(|a| {
            self.recall.iter().all(|b| {
                let in_m = !(a.n == b.n && a.iou < b.iou) || a.recall >= b.recall;
                let in_n = !(a.iou == b.iou && a.n < b.n) || a.recall <= b.recall;
                in_m && in_n
            })
        })
    }

    /// Plain-text table of the report.
    pub fn table(&self) -> String {
        let mut out = format!("samples: {}  threshold: {}\n", self.samples, self.threshold);
        for e in &self.recall {
            out.push_str(&format!("R@{}, IoU={}: {:.4}\n", e.n, e.iou, e.recall));
        }
        out.push_str(&format!("mIoU: {:.4}\n", self.miou));
        out
    }
}
