use crate::data::ClassCounts;
use crate::error::{Result, StiltError};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Per-class loss weights `w_c = 1 − N_c / ΣN`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights(pub [f64; 3]);

impl LossWeights {
    pub fn from_counts(counts: &ClassCounts) -> Result<Self> {
        let total = counts.total();
        if total == 0 {
            return Err(StiltError::Config("loss weights from an empty training set".into()));
        }
        let mut w = [0.0; 3];
        for (wc, &n) in w.iter_mut().zip(&counts.0) {
            *wc = 1.0 - n as f64 / total as f64;
        }
        Ok(LossWeights(w))
    }

    pub fn uniform() -> Self {
        LossWeights([1.0; 3])
    }
}

/// Weighted cross-entropy `Σ w_{y_n}·(−log softmax(x_n)[y_n]) / Σ w_{y_n}`
/// and its gradient with respect to the logits.
pub fn weighted_ce_loss<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<(T, Matrix<T>)> {
    if logits.rows() != labels.len() {
        return Err(StiltError::Length(logits.rows(), labels.len()));
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes || y >= 3) {
        return Err(StiltError::Config(format!("label {bad} out of range")));
    }
    let w: Vec<T> = labels.iter().map(|&y| T::cst(weights.0[y])).collect();
    let w_sum: T = w.iter().copied().sum();
    if w_sum <= T::zero() {
        return Err(StiltError::Config(
            "sum of loss weights over the batch is zero".into(),
        ));
    }
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(logits.rows(), classes);
    for (n, &y) in labels.iter().enumerate() {
        let row = logits.row(n);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += w[n] * (lse - row[y]);
        let scale = w[n] / w_sum;
        for (c, g) in grad.row_mut(n).iter_mut().enumerate() {
            let p = (row[c] - lse).exp();
            *g = scale * (p - if c == y { T::one() } else { T::zero() });
        }
    }
    Ok((loss / w_sum, grad))
}
