use crate::scalar::Scalar;
use crate::tensor::{Matrix, ParamSet};
use crate::training::TrainConfig;

/// AdamW with decoupled weight decay and bias correction (no AMSGrad).
///
/// Moment buffers are created lazily and only for trainable tensors.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Matrix<T>, Matrix<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.betas[0], cfg.betas[1], cfg.eps, cfg.weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Whether moment buffers exist for the `i`-th tensor.
    pub fn has_state(&self, i: usize) -> bool {
        matches!(self.moments.get(i), Some(Some(_)))
    }

    pub fn step(&mut self, target: &mut impl ParamSet<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::cst(self.beta1), T::cst(self.beta2));
        let (one_m_b1, one_m_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::cst(1.0 - self.beta1.powi(t));
        let bc2 = T::cst(1.0 - self.beta2.powi(t));
        let lr_t = T::cst(lr);
        let decay = T::cst(lr * self.weight_decay);
        let eps = T::cst(self.eps);

        let mut params = target.params_mut();
        if self.moments.len() < params.len() {
            self.moments.resize_with(params.len(), || None);
        }
        for (i, (_, p)) in params.iter_mut().enumerate() {
            if !p.trainable() {
                continue;
            }
            let (m, v) = self.moments[i].get_or_insert_with(|| {
                let (r, c) = p.value.shape();
                (Matrix::zeros(r, c), Matrix::zeros(r, c))
            });
            let grads = p.grad.as_slice();
            let values = p.value.as_mut_slice();
            for (((theta, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta = *theta - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *theta;
            }
        }
    }
}
