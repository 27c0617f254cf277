//! Central finite-difference oracle for analytic gradients.

use crate::error::{Result, StiltError};
use crate::scalar::Scalar;
use crate::tensor::ParamSet;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step `h`.
    pub step: f64,
    /// Check at most this many evenly strided coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    /// Lower bound on the relative-error denominator so coordinates whose
    /// true gradient is ~0 are judged on absolute error.
    pub denominator_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords_per_tensor: None,
            denominator_floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, coordinate, analytic, numeric)` at the maximum.
    pub worst: Option<(String, usize, f64, f64)>,
    pub coordinates_checked: usize,
    pub frozen_tensors_skipped: usize,
}

/// Compares the gradients currently stored in `target` against
/// `(f(θ+h) − f(θ−h)) / 2h`, coordinate by coordinate.
///
/// The caller populates the analytic gradients first. Frozen tensors are
/// skipped. Every perturbed value is restored bit-exactly.
pub fn finite_difference_check<T, M, F>(
    target: &mut M,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    M: ParamSet<T>,
    F: FnMut(&M) -> Result<T>,
{
    if !(opts.step > 0.0) {
        return Err(StiltError::Config(format!("gradcheck step must be > 0, got {}", opts.step)));
    }
    let h = T::cst(opts.step);
    let mut report = GradCheckReport::default();
    let layout: Vec<(String, bool, usize)> = target
        .params()
        .into_iter()
        .map(|(name, p)| (name, p.trainable(), p.value.as_slice().len()))
        .collect();

    let mut eval = |m: &M, what: &str| -> Result<f64> {
        let v = f(m)?.to_f64_lossy();
        if !v.is_finite() {
            return Err(StiltError::NonFinite(format!("gradcheck evaluation at {what}")));
        }
        Ok(v)
    };

    for (idx, (name, trainable, len)) in layout.into_iter().enumerate() {
        if !trainable {
            report.frozen_tensors_skipped += 1;
            continue;
        }
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(max) if max < len => (0..max).map(|i| i * len / max).collect(),
            _ => (0..len).collect(),
        };
        for j in coords {
            let (orig, analytic) = {
                let mut ps = target.params_mut();
                let p = &mut ps[idx].1;
                (p.value.as_slice()[j], p.grad.as_slice()[j].to_f64_lossy())
            };
            set_coord(target, idx, j, orig + h);
            let plus = eval(target, &name)?;
            set_coord(target, idx, j, orig - h);
            let minus = eval(target, &name)?;
            set_coord(target, idx, j, orig);

            let numeric = (plus - minus) / (2.0 * opts.step);
            let denom = analytic.abs().max(numeric.abs()).max(opts.denominator_floor);
            let rel = (analytic - numeric).abs() / denom;
            report.coordinates_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), j, analytic, numeric));
            }
        }
    }
    Ok(report)
}

fn set_coord<T: Scalar, M: ParamSet<T>>(target: &mut M, idx: usize, j: usize, v: T) {
    let mut ps = target.params_mut();
    ps[idx].1.value.as_mut_slice()[j] = v;
}

/// Full-model check: random inputs, labels and class weights; train-mode
/// forward with dropout disabled so the objective is deterministic.
pub fn check_model_gradients(
    config: &crate::model::ModelConfig,
    batch_size: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    use crate::model::{Batch, Model};
    use crate::ops::Mode;
    use crate::rng::DeterministicRng;
    use crate::tensor::Matrix;
    use crate::training::{weighted_ce_loss, LossWeights};

    let mut rng = DeterministicRng::with_stream(seed, 0);
    let mut model = Model::<f64>::init(config, &mut rng)?;
    // Perturb the identity adapters so their gradients are generic.
    for p in [&mut model.image_adapter.weight, &mut model.text_adapter.weight] {
        for v in p.value.as_mut_slice() {
            *v += 0.1 * rng.standard_normal();
        }
    }
    let d = config.dim;
    let mut draw = |n| Matrix::from_vec(batch_size, n, (0..batch_size * n).map(|_| rng.standard_normal()).collect());
    let batch = Batch::new(draw(d)?, draw(d)?)?;
    let labels: Vec<usize> = (0..batch_size).map(|i| i % 3).collect();
    let weights = LossWeights([
        rng.uniform_range(0.1, 1.0),
        rng.uniform_range(0.1, 1.0),
        rng.uniform_range(0.1, 1.0),
    ]);

    let objective = |m: &Model<f64>| -> Result<f64> {
        let trace = m.forward(&batch, Mode::Train, 0.0, &mut DeterministicRng::new(0))?;
        Ok(weighted_ce_loss(&trace.logits, &labels, &weights)?.0)
    };

    model.zero_grad();
    let trace = model.forward(&batch, Mode::Train, 0.0, &mut DeterministicRng::new(0))?;
    let (_, dlogits) = weighted_ce_loss(&trace.logits, &labels, &weights)?;
    model.backward(&trace, &dlogits)?;
    finite_difference_check(&mut model, objective, opts)
}

/// Small model used by the oracle suite: D = D_f = 8 with narrow hidden
/// layers so every coordinate can be checked.
pub fn oracle_model_config() -> crate::model::ModelConfig {
    crate::model::ModelConfig {
        dim: 8,
        fused_dim: 8,
        attention_hidden: vec![16, 8, 4],
        head_hidden: vec![16, 8],
        ..Default::default()
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub models: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub coordinates_checked: usize,
}

/// Checks `models` random models (seeds `base_seed..base_seed+models`) with
/// batch size 4, in parallel.
pub fn run_model_suite(models: usize, base_seed: u64, opts: &GradCheckOptions) -> Result<SuiteReport> {
    use rayon::prelude::*;
    let cfg = oracle_model_config();
    let reports: Vec<(u64, GradCheckReport)> = (0..models as u64)
        .into_par_iter()
        .map(|i| Ok((base_seed + i, check_model_gradients(&cfg, 4, base_seed + i, opts)?)))
        .collect::<Result<_>>()?;
    let mut out = SuiteReport {
        models,
        max_rel_error: 0.0,
        worst_seed: base_seed,
        worst: None,
        coordinates_checked: 0,
    };
    for (seed, r) in reports {
        out.coordinates_checked += r.coordinates_checked;
        if out.worst.is_none() || r.max_rel_error > out.max_rel_error {
            out.max_rel_error = r.max_rel_error;
            out.worst_seed = seed;
            out.worst = r.worst;
        }
    }
    Ok(out)
}
