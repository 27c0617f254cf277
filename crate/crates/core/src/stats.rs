//! Wilcoxon signed-rank test for matched pairs and restart summaries.
//!
//! Conventions: differences are `score_b − score_a`; zero differences are
//! dropped; tied `|d|` share the average rank; `W` is the positive rank sum
//! `W⁺`. Up to [`EXACT_MAX_N`] non-zero pairs the two-sided p-value is
//! exact over all `2^n` sign assignments, otherwise it uses the normal
//! approximation with tie-corrected variance and a 0.5 continuity
//! correction. Two-sided p is `2·min(P(W⁺ ≤ w), P(W⁺ ≥ w))`, capped at 1.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StiltError};

pub const EXACT_MAX_N: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub run_id: String,
    pub score_a: f64,
    pub score_b: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

impl TestMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            TestMethod::Exact => "exact",
            TestMethod::NormalApprox => "normal_approx",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub n_used: usize,
    pub n_zero: usize,
    pub statistic: f64,
    pub p_two_sided: f64,
    pub method: TestMethod,
}

/// Average ranks of `|d|`, doubled so every rank is an integer.
pub(crate) fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, times two
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        i = j + 1;
    }
    ranks
}

/// Number of sign assignments giving each doubled positive-rank sum.
fn sign_sum_distribution(doubled: &[u64]) -> Vec<u64> {
    let total: u64 = doubled.iter().sum();
    let mut ways = vec![0u64; total as usize + 1];
    ways[0] = 1;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if ways[s] != 0 {
                ways[s + r] += ways[s];
            }
        }
        reach += r;
    }
    ways
}

fn exact_p(doubled: &[u64], w_doubled: u64) -> f64 {
    let ways = sign_sum_distribution(doubled);
    let all = 2f64.powi(doubled.len() as i32);
    let w = w_doubled as usize;
    let lower: u64 = ways[..=w].iter().sum();
    let upper: u64 = ways[w..].iter().sum();
    (2.0 * lower.min(upper) as f64 / all).min(1.0)
}

fn normal_p(doubled: &[u64], w_plus: f64) -> f64 {
    let n = doubled.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = doubled.to_vec();
    sorted.sort_unstable();
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Signed-rank test on raw differences `d = b − a`.
pub fn wilcoxon_from_differences(diffs: &[f64]) -> Result<TestResult> {
    if diffs.is_empty() {
        return Err(StiltError::Degenerate("no pairs to test".into()));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(StiltError::NonFinite("paired difference".into()));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n_zero = diffs.len() - nonzero.len();
    if nonzero.is_empty() {
        return Err(StiltError::Degenerate(
            "all paired differences are zero".into(),
        ));
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let doubled = doubled_ranks(&abs);
    let w_doubled: u64 = nonzero
        .iter()
        .zip(&doubled)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let w_plus = w_doubled as f64 / 2.0;
    let (p, method) = if nonzero.len() <= EXACT_MAX_N {
        (exact_p(&doubled, w_doubled), TestMethod::Exact)
    } else {
        (normal_p(&doubled, w_plus), TestMethod::NormalApprox)
    };
    Ok(TestResult {
        n_used: nonzero.len(),
        n_zero,
        statistic: w_plus,
        p_two_sided: p,
        method,
    })
}

pub fn wilcoxon_signed_rank(pairs: &[PairedSample]) -> Result<TestResult> {
    let diffs: Vec<f64> = pairs.iter().map(|p| p.score_b - p.score_a).collect();
    wilcoxon_from_differences(&diffs)
}

/// Normal-approximation p-value regardless of `n`, for cross-checking the
/// exact method.
pub fn wilcoxon_normal_approx(diffs: &[f64]) -> Result<f64> {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(StiltError::Degenerate("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let doubled = doubled_ranks(&abs);
    let w_doubled: u64 = nonzero
        .iter()
        .zip(&doubled)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    Ok(normal_p(&doubled, w_doubled as f64 / 2.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 when n = 1.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(scores: &[f64]) -> Result<SummaryStats> {
    if scores.is_empty() {
        return Err(StiltError::Degenerate("summary of an empty sample".into()));
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SummaryStats {
        n,
        mean: mean.clamp(min, max),
        std,
        min,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let r = wilcoxon_from_differences(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.statistic, r.p_two_sided, r.method), (6.0, 0.25, TestMethod::Exact));

        let r = wilcoxon_from_differences(&[1.0, -1.0]).unwrap();
        assert_eq!((r.statistic, r.p_two_sided), (1.5, 1.0));

        assert!(matches!(
            wilcoxon_from_differences(&[0.0, 0.0, 0.0]),
            Err(StiltError::Degenerate(_))
        ));
    }

    #[test]
    fn zeros_are_dropped() {
        let r = wilcoxon_from_differences(&[0.0, 1.0, 2.0, 3.0, 0.0]).unwrap();
        assert_eq!((r.n_used, r.n_zero, r.p_two_sided), (3, 2, 0.25));
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(doubled_ranks(&[0.5, 0.1, 0.5, 0.9]), vec![5, 2, 5, 8]);
    }

    #[test]
    fn pairs_use_b_minus_a() {
        let pairs: Vec<_> = [(0.5, 0.6), (0.5, 0.7), (0.5, 0.8)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| PairedSample {
                run_id: i.to_string(),
                score_a: a,
                score_b: b,
            })
            .collect();
        assert_eq!(wilcoxon_signed_rank(&pairs).unwrap().statistic, 6.0);
    }

    #[test]
    fn large_n_switches_to_normal() {
        let d: Vec<f64> = (1..=30).map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 }).collect();
        let r = wilcoxon_from_differences(&d).unwrap();
        assert_eq!(r.method, TestMethod::NormalApprox);
        assert!((0.0..=1.0).contains(&r.p_two_sided));
    }

    #[test]
    fn summaries() {
        let s = summarize(&[0.5]).unwrap();
        assert_eq!((s.mean, s.std), (0.5, 0.0));
        let s = summarize(&[0.4, 0.6]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-15);
        assert!((s.std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(summarize(&[0.3; 7]).unwrap().std, 0.0);
        assert!(summarize(&[]).is_err());
    }
}
