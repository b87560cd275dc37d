//! Binary classification metrics. The positive class is label 1 (stressful).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

pub fn confusion(preds: &[usize], golds: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(Error::Protocol(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (i, (&p, &g)) in preds.iter().zip(golds).enumerate() {
        match (p, g) {
            (1, 1) => m.tp += 1,
            (1, 0) => m.fp += 1,
            (0, 1) => m.fn_ += 1,
            (0, 0) => m.tn += 1,
            _ => {
                return Err(Error::Data(format!(
                    "non-binary label at position {i}: pred {p}, gold {g}"
                )))
            }
        }
    }
    Ok(m)
}

/// Positive-class F1.
///
/// With no true positives the score is 0 if anything was misclassified and
/// 1 if the set is all-negative and predicted all-negative.
pub fn f1_binary(m: &ConfusionMatrix) -> f64 {
    if m.tp == 0 {
        return if m.fp == 0 && m.fn_ == 0 { 1.0 } else { 0.0 };
    }
    let p = m.tp as f64 / (m.tp + m.fp) as f64;
    let r = m.tp as f64 / (m.tp + m.fn_) as f64;
    2.0 * p * r / (p + r)
}

pub fn accuracy(m: &ConfusionMatrix) -> Result<f64> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Data("accuracy of an empty confusion matrix".into()));
    }
    Ok((m.tp + m.tn) as f64 / total as f64)
}
