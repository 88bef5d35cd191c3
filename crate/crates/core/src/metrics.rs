//! Binary classification metrics with label 1 (sarcastic) as the positive class.

use alloc::format;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl MetricsReport {
    /// Derives every rate from the confusion counts. Zero denominators give 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            f1,
            precision,
            recall,
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            tp,
            fp,
            fn_,
            tn,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn compute_metrics(predictions: &[u8], labels: &[u8]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            (0, 0) => tn += 1,
            _ => return Err(Error::Contract(format!("non-binary pair (prediction {p}, label {y})"))),
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, tn))
}
