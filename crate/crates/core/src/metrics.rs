//! Support-weighted precision/recall/F1 and paired-correctness tables.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StiltError};

pub const CLASSES: usize = 3;

/// Per-class true positives, false positives, false negatives and support.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: [usize; CLASSES],
    pub fp: [usize; CLASSES],
    pub fn_: [usize; CLASSES],
    pub support: [usize; CLASSES],
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.support.iter().sum()
    }

    pub fn correct(&self) -> usize {
        self.tp.iter().sum()
    }
}

fn check_class(c: usize) -> Result<usize> {
    if c >= CLASSES {
        return Err(StiltError::Config(format!("class id {c} out of range")));
    }
    Ok(c)
}

pub fn confusion(labels: &[usize], predictions: &[usize]) -> Result<ConfusionCounts> {
    if labels.len() != predictions.len() {
        return Err(StiltError::Length(labels.len(), predictions.len()));
    }
    let mut c = ConfusionCounts::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        let (y, p) = (check_class(y)?, check_class(p)?);
        c.support[y] += 1;
        if y == p {
            c.tp[y] += 1;
        } else {
            c.fp[p] += 1;
            c.fn_[y] += 1;
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: [f64; CLASSES],
    pub recall: [f64; CLASSES],
    pub f1: [f64; CLASSES],
    /// Support fractions `N_c / ΣN`.
    pub weights: [f64; CLASSES],
    pub weighted_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
}

/// Per-class scores averaged with weights proportional to class support.
/// Undefined ratios (0/0) count as 0.
pub fn weighted_metrics(counts: &ConfusionCounts) -> Result<MetricReport> {
    let total = counts.total();
    if total == 0 {
        return Err(StiltError::Degenerate("metrics over zero samples".into()));
    }
    let mut r = MetricReport {
        precision: [0.0; CLASSES],
        recall: [0.0; CLASSES],
        f1: [0.0; CLASSES],
        weights: [0.0; CLASSES],
        weighted_f1: 0.0,
        weighted_precision: 0.0,
        weighted_recall: 0.0,
    };
    for c in 0..CLASSES {
        let p = ratio(counts.tp[c], counts.tp[c] + counts.fp[c]);
        let rc = ratio(counts.tp[c], counts.tp[c] + counts.fn_[c]);
        let f = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        let w = ratio(counts.support[c], total);
        r.precision[c] = p;
        r.recall[c] = rc;
        r.f1[c] = f;
        r.weights[c] = w;
        r.weighted_precision += w * p;
        r.weighted_recall += w * rc;
        r.weighted_f1 += w * f;
    }
    Ok(r)
}

/// Convenience: [`confusion`] followed by [`weighted_metrics`].
pub fn evaluate(labels: &[usize], predictions: &[usize]) -> Result<MetricReport> {
    weighted_metrics(&confusion(labels, predictions)?)
}

/// Joint correctness of two classifiers on the same samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub both_correct: usize,
    pub only_a_correct: usize,
    pub only_b_correct: usize,
    pub both_wrong: usize,
}

impl ContingencyTable {
    pub fn total(&self) -> usize {
        self.both_correct + self.only_a_correct + self.only_b_correct + self.both_wrong
    }
}

pub fn contingency(labels: &[usize], preds_a: &[usize], preds_b: &[usize]) -> Result<ContingencyTable> {
    if labels.len() != preds_a.len() {
        return Err(StiltError::Length(labels.len(), preds_a.len()));
    }
    if labels.len() != preds_b.len() {
        return Err(StiltError::Length(labels.len(), preds_b.len()));
    }
    let mut t = ContingencyTable::default();
    for ((&y, &a), &b) in labels.iter().zip(preds_a).zip(preds_b) {
        match (a == y, b == y) {
            (true, true) => t.both_correct += 1,
            (true, false) => t.only_a_correct += 1,
            (false, true) => t.only_b_correct += 1,
            (false, false) => t.both_wrong += 1,
        }
    }
    Ok(t)
}
