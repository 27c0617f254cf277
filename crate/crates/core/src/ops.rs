//! Differentiable building blocks with explicit backward rules.
//!
//! Every forward function returns what its backward needs; backward
//! functions accumulate parameter gradients in place and return the
//! gradient with respect to the layer input.

use crate::error::{Result, StiltError};
use crate::rng::DeterministicRng;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Param};

/// Whether a forward pass is part of training or evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `x·W + b` with `b` broadcast over rows.
pub fn affine<T: Scalar>(x: &Matrix<T>, w: &Param<T>, b: &Param<T>) -> Result<Matrix<T>> {
    if x.cols() != w.value.rows() || b.value.shape() != (1, w.value.cols()) {
        return Err(StiltError::dim(
            "affine",
            x.shape_str(),
            format!("W {} / b {}", w.value.shape_str(), b.value.shape_str()),
        ));
    }
    let mut out = x.matmul(&w.value)?;
    let bias = b.value.as_slice();
    for r in 0..out.rows() {
        for (o, &bv) in out.row_mut(r).iter_mut().zip(bias) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Backward of [`affine`]: accumulates `dW = xᵀ·dout`, `db = Σ_rows dout`
/// and returns `dx = dout·Wᵀ`.
pub fn affine_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &mut Param<T>,
    b: &mut Param<T>,
    dout: &Matrix<T>,
) -> Result<Matrix<T>> {
    if dout.rows() != x.rows() || dout.cols() != w.value.cols() {
        return Err(StiltError::dim(
            "affine_backward",
            dout.shape_str(),
            format!("x {} / W {}", x.shape_str(), w.value.shape_str()),
        ));
    }
    if w.trainable() {
        w.accumulate(&x.t_matmul(dout)?)?;
    }
    if b.trainable() {
        b.accumulate(&dout.column_sums())?;
    }
    dout.matmul_t(&w.value)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GeLU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let half = T::cst(0.5);
    let inv_sqrt2 = T::cst(std::f64::consts::FRAC_1_SQRT_2);
    x.map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()))
}

/// `dy · GeLU'(x)` with `GeLU'(x) = Φ(x) + x·φ(x)`.
pub fn gelu_backward<T: Scalar>(x: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
    let half = T::cst(0.5);
    let inv_sqrt2 = T::cst(std::f64::consts::FRAC_1_SQRT_2);
    let c = T::cst(FRAC_1_SQRT_2PI);
    x.zip_map(dy, |v, g| {
        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
        let pdf = c * (-half * v * v).exp();
        g * (cdf + v * pdf)
    })
}

pub fn tanh_act<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| v.tanh())
}

/// Backward of tanh given its output `y`.
pub fn tanh_backward<T: Scalar>(y: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
    y.zip_map(dy, |v, g| g * (T::one() - v * v))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_row<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Backward of [`softmax_row`] given its output `y`:
/// `dx = y ⊙ (dy − ⟨dy, y⟩)` per row.
pub fn softmax_row_backward<T: Scalar>(y: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
    if y.shape() != dy.shape() {
        return Err(StiltError::dim("softmax_backward", y.shape_str(), dy.shape_str()));
    }
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), dy.row(r));
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Ok(out)
}

/// Multiplicative dropout mask; `None` means the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<T>(Option<Matrix<T>>);

impl<T: Scalar> DropoutMask<T> {
    pub fn identity() -> Self {
        DropoutMask(None)
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match &self.0 {
            None => Ok(x.clone()),
            Some(mask) => x.zip_map(mask, |a, m| a * m),
        }
    }

    /// The mask is its own backward rule.
    pub fn backward(&self, dy: &Matrix<T>) -> Result<Matrix<T>> {
        self.apply(dy)
    }
}

/// Inverted dropout. Eval mode and `rate == 0` draw nothing from `rng`.
pub fn dropout<T: Scalar>(
    x: &Matrix<T>,
    rate: f64,
    mode: Mode,
    rng: &mut DeterministicRng,
) -> Result<(Matrix<T>, DropoutMask<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(StiltError::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), DropoutMask::identity()));
    }
    let keep = T::cst(1.0 / (1.0 - rate));
    let mut mask = Matrix::zeros(x.rows(), x.cols());
    for m in mask.as_mut_slice() {
        if rng.uniform() >= rate {
            *m = keep;
        }
    }
    let mask = DropoutMask(Some(mask));
    Ok((mask.apply(x)?, mask))
}

/// Batch normalisation parameters and running statistics for `D` features.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Matrix<T>,
    pub running_var: Matrix<T>,
    pub momentum: T,
    pub eps: T,
}

/// Saved forward values for [`NormState::backward`].
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    mode: Mode,
    xhat: Matrix<T>,
    inv_std: Vec<T>,
    /// Batch mean and unbiased batch variance, for the running-stat update.
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

impl<T: Scalar> NormState<T> {
    pub fn new(features: usize, momentum: f64, eps: f64) -> Self {
        NormState {
            gamma: Param::new(Matrix::filled(1, features, T::one())),
            beta: Param::new(Matrix::zeros(1, features)),
            running_mean: Matrix::zeros(1, features),
            running_var: Matrix::filled(1, features, T::one()),
            momentum: T::cst(momentum),
            eps: T::cst(eps),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.value.cols()
    }

    pub fn forward(&self, x: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, NormCache<T>)> {
        let (b, d) = x.shape();
        if d != self.features() {
            return Err(StiltError::dim("batch_norm", x.shape_str(), self.features()));
        }
        let (mean, var_biased, var_unbiased) = match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(StiltError::BatchSize(b));
                }
                let n = T::from_usize(b).unwrap();
                let mean: Vec<T> = x.column_sums().as_slice().iter().map(|&s| s / n).collect();
                let mut var = vec![T::zero(); d];
                for r in 0..b {
                    for ((v, &xv), &mu) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        let c = xv - mu;
                        *v += c * c;
                    }
                }
                let unbiased = var
                    .iter()
                    .map(|&v| v / (n - T::one()))
                    .collect::<Vec<_>>();
                let biased = var.iter().map(|&v| v / n).collect();
                (mean, biased, unbiased)
            }
            Mode::Eval => (
                self.running_mean.as_slice().to_vec(),
                self.running_var.as_slice().to_vec(),
                Vec::new(),
            ),
        };
        let inv_std: Vec<T> = var_biased
            .iter()
            .map(|&v| T::one() / (v + self.eps).sqrt())
            .collect();
        let mut xhat = Matrix::zeros(b, d);
        let mut out = Matrix::zeros(b, d);
        let (g, bt) = (self.gamma.value.as_slice(), self.beta.value.as_slice());
        for r in 0..b {
            let xr = x.row(r);
            for c in 0..d {
                let h = (xr[c] - mean[c]) * inv_std[c];
                xhat.set(r, c, h);
                out.set(r, c, g[c] * h + bt[c]);
            }
        }
        let batch_mean = if mode == Mode::Train { mean } else { Vec::new() };
        Ok((
            out,
            NormCache {
                mode,
                xhat,
                inv_std,
                batch_mean,
                batch_var_unbiased: var_unbiased,
            },
        ))
    }

    /// Accumulates `dγ`, `dβ` and returns `dx`, differentiating through the
    /// batch statistics in train mode.
    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
        if dy.shape() != cache.xhat.shape() {
            return Err(StiltError::dim(
                "batch_norm_backward",
                dy.shape_str(),
                cache.xhat.shape_str(),
            ));
        }
        let (b, d) = dy.shape();
        let mut dgamma = Matrix::zeros(1, d);
        let dbeta = dy.column_sums();
        for r in 0..b {
            for (g, (&dv, &h)) in dgamma
                .as_mut_slice()
                .iter_mut()
                .zip(dy.row(r).iter().zip(cache.xhat.row(r)))
            {
                *g += dv * h;
            }
        }
        let gamma = self.gamma.value.as_slice().to_vec();
        let mut dx = Matrix::zeros(b, d);
        match cache.mode {
            Mode::Eval => {
                for r in 0..b {
                    for c in 0..d {
                        dx.set(r, c, dy.get(r, c) * gamma[c] * cache.inv_std[c]);
                    }
                }
            }
            Mode::Train => {
                let n = T::from_usize(b).unwrap();
                // Σ dxhat and Σ dxhat·xhat per column, with dxhat = dy·γ.
                let sum_dxhat: Vec<T> = (0..d).map(|c| dbeta.get(0, c) * gamma[c]).collect();
                let sum_dxhat_xhat: Vec<T> =
                    (0..d).map(|c| dgamma.get(0, c) * gamma[c]).collect();
                for r in 0..b {
                    for c in 0..d {
                        let dxhat = dy.get(r, c) * gamma[c];
                        let v = cache.inv_std[c] / n
                            * (n * dxhat - sum_dxhat[c] - cache.xhat.get(r, c) * sum_dxhat_xhat[c]);
                        dx.set(r, c, v);
                    }
                }
            }
        }
        self.gamma.accumulate(&dgamma)?;
        self.beta.accumulate(&dbeta)?;
        Ok(dx)
    }

    /// Folds the statistics of one train-mode batch into the running values.
    pub fn commit(&mut self, cache: &NormCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        let keep = T::one() - m;
        for (rm, &bm) in self.running_mean.as_mut_slice().iter_mut().zip(&cache.batch_mean) {
            *rm = keep * *rm + m * bm;
        }
        for (rv, &bv) in self
            .running_var
            .as_mut_slice()
            .iter_mut()
            .zip(&cache.batch_var_unbiased)
        {
            *rv = keep * *rv + m * bv;
        }
    }
}

/// Dense layer `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform(−1/√fan_in, 1/√fan_in) for weight and bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut DeterministicRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |rows, cols| {
            let data = (0..rows * cols)
                .map(|_| T::cst(rng.uniform_range(-bound, bound)))
                .collect();
            Param::new(Matrix::from_vec(rows, cols, data).expect("sized"))
        };
        let weight = draw(fan_in, fan_out);
        let bias = draw(1, fan_out);
        Linear { weight, bias }
    }

    pub fn identity(n: usize) -> Self {
        Linear {
            weight: Param::new(Matrix::identity(n)),
            bias: Param::new(Matrix::zeros(1, n)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        affine(x, &self.weight, &self.bias)
    }

    pub fn backward(&mut self, x: &Matrix<T>, dout: &Matrix<T>) -> Result<Matrix<T>> {
        affine_backward(x, &mut self.weight, &mut self.bias, dout)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.weight.set_trainable(trainable);
        self.bias.set_trainable(trainable);
    }
}

/// Chain of dense layers with GeLU between consecutive layers and no
/// activation after the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseStack<T> {
    pub layers: Vec<Linear<T>>,
}

/// Inputs to every layer of a [`DenseStack`] plus the pre-activations of the
/// hidden layers.
#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    inputs: Vec<Matrix<T>>,
    pre: Vec<Matrix<T>>,
}

impl<T> DenseCache<T> {
    /// Input of the final layer (the last hidden activation).
    pub fn last_input(&self) -> &Matrix<T> {
        self.inputs.last().expect("stack has at least one layer")
    }
}

impl<T: Scalar> DenseStack<T> {
    /// `widths` are the layer output sizes, e.g. `[256, 64, 8, 1]`.
    pub fn init(input: usize, widths: &[usize], rng: &mut DeterministicRng) -> Self {
        let mut fan_in = input;
        let layers = widths
            .iter()
            .map(|&w| {
                let l = Linear::init(fan_in, w, rng);
                fan_in = w;
                l
            })
            .collect();
        DenseStack { layers }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, DenseCache<T>)> {
        let mut cache = DenseCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len().saturating_sub(1)),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            cache.inputs.push(h);
            if i + 1 < self.layers.len() {
                h = gelu(&z);
                cache.pre.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, cache))
    }

    pub fn backward(&mut self, cache: &DenseCache<T>, dout: &Matrix<T>) -> Result<Matrix<T>> {
        let mut g = dout.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                g = gelu_backward(&cache.pre[i], &g)?;
            }
            g = self.layers[i].backward(&cache.inputs[i], &g)?;
        }
        Ok(g)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Param<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), &l.weight),
                    (format!("{prefix}.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), &mut l.weight),
                    (format!("{prefix}.{i}.bias"), &mut l.bias),
                ]
            })
            .collect()
    }
}
