//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use stilt_core::data::{Dataset, DatasetManifest, EmbeddingRecord, Label, Split};
use stilt_core::DeterministicRng;

/// Weighted (F1, precision, recall) straight from the raw vectors, using
/// `F1 = 2TP / (2TP + FP + FN)`.
pub fn brute_force_weighted(labels: &[usize], preds: &[usize]) -> (f64, f64, f64) {
    let n = labels.len() as f64;
    let (mut f1, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for c in 0..3 {
        let mut tp = 0usize;
        let mut predicted = 0usize;
        let mut actual = 0usize;
        for (&y, &p) in labels.iter().zip(preds) {
            if y == c && p == c {
                tp += 1;
            }
            if p == c {
                predicted += 1;
            }
            if y == c {
                actual += 1;
            }
        }
        let fp = predicted - tp;
        let fn_ = actual - tp;
        let w = actual as f64 / n;
        if predicted > 0 {
            prec += w * tp as f64 / predicted as f64;
        }
        if actual > 0 {
            rec += w * tp as f64 / actual as f64;
        }
        if 2 * tp + fp + fn_ > 0 {
            f1 += w * (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
        }
    }
    (f1, prec, rec)
}

/// Two-sided signed-rank p-value by listing all `2^n` sign vectors over the
/// non-zero differences. `None` if every difference is zero.
pub fn enumerated_wilcoxon_p(diffs: &[f64]) -> Option<(f64, f64)> {
    let d: Vec<f64> = diffs.iter().copied().filter(|x| *x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return None;
    }
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let (mut ge, mut le) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w >= observed - 1e-9 {
            ge += 1;
        }
        if w <= observed + 1e-9 {
            le += 1;
        }
    }
    let total = (1u64 << n) as f64;
    let p = (2.0 * (ge.min(le) as f64 / total)).min(1.0);
    Some((observed, p))
}

pub fn random_record(id: &str, label: usize, dim: usize, rng: &mut DeterministicRng) -> EmbeddingRecord {
    let mut v = || (0..dim).map(|_| rng.standard_normal()).collect::<Vec<f64>>();
    EmbeddingRecord {
        id: id.to_string(),
        split: Split::Train,
        label: Label::from_index(label as i64).unwrap(),
        image_embedding: Some(v()),
        text_embedding: Some(v()),
    }
}

/// Train records with the given per-class counts.
pub fn imbalanced_records(counts: [usize; 3], dim: usize, seed: u64) -> Vec<EmbeddingRecord> {
    let mut rng = DeterministicRng::new(seed);
    let mut out = Vec::new();
    for (c, &k) in counts.iter().enumerate() {
        for i in 0..k {
            out.push(random_record(&format!("c{c}-{i:04}"), c, dim, &mut rng));
        }
    }
    out
}

pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

pub fn dataset(dim: usize, records: Vec<EmbeddingRecord>) -> Dataset {
    Dataset::from_records(DatasetManifest::with_zero_blanks("test", dim, "test.jsonl"), records)
}
