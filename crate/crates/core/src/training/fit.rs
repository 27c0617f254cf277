//! Minibatch training with per-epoch validation and early stopping.

use crate::data::{class_counts, to_batch, DatasetManifest, EmbeddingRecord};
use crate::error::{Result, StiltError};
use crate::metrics;
use crate::model::{Batch, Model};
use crate::ops::Mode;
use crate::rng::DeterministicRng;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, ParamSet};
use crate::training::loss::{weighted_ce_loss, LossWeights};
use crate::training::optim::AdamW;
use crate::training::schedule::cosine_lr;
use crate::training::{EarlyStopCriterion, TrainConfig};

const EVAL_BATCH: usize = 256;

/// Records plus the manifest whose blanks resolve their missing modality.
#[derive(Clone, Copy, Debug)]
pub struct StageInput<'a> {
    pub records: &'a [EmbeddingRecord],
    pub manifest: &'a DatasetManifest,
}

impl<'a> StageInput<'a> {
    pub fn new(records: &'a [EmbeddingRecord], manifest: &'a DatasetManifest) -> Self {
        StageInput { records, manifest }
    }

    pub fn batch<T: Scalar>(&self) -> Result<Batch<T>> {
        let refs: Vec<&EmbeddingRecord> = self.records.iter().collect();
        to_batch(&refs, self.manifest)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label.index()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: String,
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_weighted_f1: f64,
    pub lr: f64,
    /// Largest per-step gradient L2 norm of each adapter during the epoch.
    pub image_adapter_grad_norm: f64,
    pub text_adapter_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_value: f64,
    pub stopped_epoch: usize,
}

/// Tracks the best validation value; signals a stop once more than
/// `patience` consecutive epochs fail to improve on it.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    criterion: EarlyStopCriterion,
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(criterion: EarlyStopCriterion, patience: usize) -> Self {
        EarlyStopper {
            criterion,
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Observation {
        let improved = value.is_finite()
            && match self.best {
                None => true,
                Some((_, b)) => match self.criterion {
                    EarlyStopCriterion::MinValLoss => value < b,
                    EarlyStopCriterion::MaxValWeightedF1 => value > b,
                },
            };
        if improved {
            self.best = Some((epoch, value));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Observation {
            improved,
            stop: self.stale > self.patience,
        }
    }
}

/// Validation loss and weighted F1 in eval mode.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    batch: &Batch<T>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<(f64, f64, Matrix<T>)> {
    let logits = predict_in_chunks(model, batch)?;
    let (loss, _) = weighted_ce_loss(&logits, labels, weights)?;
    let preds = argmax_rows(&logits);
    let report = metrics::evaluate(labels, &preds)?;
    Ok((loss.to_f64_lossy(), report.weighted_f1, logits))
}

pub fn predict_in_chunks<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<Matrix<T>> {
    let n = batch.len();
    let mut data = Vec::with_capacity(n * 3);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let part = Batch {
            image: batch.image.select_rows(chunk),
            text: batch.text.select_rows(chunk),
        };
        data.extend_from_slice(model.predict_logits(&part)?.as_slice());
    }
    Matrix::from_vec(n, 3, data)
}

/// First index of the row maximum.
pub fn argmax_rows<T: Scalar>(logits: &Matrix<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Shuffled minibatches; a trailing batch of one joins its predecessor so
/// batch norm always sees at least two rows.
fn minibatches(n: usize, batch_size: usize, rng: &mut DeterministicRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().map_or(false, |b| b.len() < 2) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

fn grad_norm<T: Scalar>(model: &Model<T>, image: bool) -> f64 {
    let a = if image { &model.image_adapter } else { &model.text_adapter };
    (a.weight.grad.squared_norm() + a.bias.grad.squared_norm())
        .to_f64_lossy()
        .sqrt()
}

/// Trains `model` in place and leaves it holding the best-epoch parameters.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: StageInput<'_>,
    val: StageInput<'_>,
    config: &TrainConfig,
    stage: &str,
    rng: &mut DeterministicRng,
) -> Result<FitOutcome> {
    config.validate()?;
    if train.records.len() < 2 {
        return Err(StiltError::BatchSize(train.records.len()));
    }
    if val.records.is_empty() {
        return Err(StiltError::Config("validation set is empty".into()));
    }
    let weights = LossWeights::from_counts(&class_counts(train.records))?;
    let train_batch: Batch<T> = train.batch()?;
    let train_labels = train.labels();
    let val_batch: Batch<T> = val.batch()?;
    let val_labels = val.labels();

    let mut opt = AdamW::<T>::from_config(config);
    let mut stopper = EarlyStopper::new(config.early_stop_criterion, config.patience);
    let mut best_model = model.clone();
    let mut history = Vec::new();
    let mut stopped_epoch = config.max_epochs;

    for epoch in 0..config.max_epochs {
        let lr = cosine_lr(epoch, config.lr_min, config.lr_max, config.max_epochs);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let (mut img_norm, mut txt_norm) = (0.0f64, 0.0f64);
        for (b, idx) in minibatches(train_labels.len(), config.batch_size, rng)
            .into_iter()
            .enumerate()
        {
            let batch = Batch {
                image: train_batch.image.select_rows(&idx),
                text: train_batch.text.select_rows(&idx),
            };
            let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            model.zero_grad();
            let trace = model.forward(&batch, Mode::Train, config.dropout, rng)?;
            let (loss, dlogits) = weighted_ce_loss(&trace.logits, &labels, &weights)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(StiltError::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    lr,
                });
            }
            model.backward(&trace, &dlogits)?;
            model.commit_norm_stats(&trace);
            img_norm = img_norm.max(grad_norm(model, true));
            txt_norm = txt_norm.max(grad_norm(model, false));
            opt.step(model, lr);
            loss_sum += loss;
            steps += 1;
        }

        let (val_loss, val_f1, _) = evaluate(model, &val_batch, &val_labels, &weights)?;
        history.push(EpochRecord {
            stage: stage.to_string(),
            epoch: epoch + 1,
            train_loss: loss_sum / steps as f64,
            val_loss,
            val_weighted_f1: val_f1,
            lr,
            image_adapter_grad_norm: img_norm,
            text_adapter_grad_norm: txt_norm,
        });
        let value = match config.early_stop_criterion {
            EarlyStopCriterion::MinValLoss => val_loss,
            EarlyStopCriterion::MaxValWeightedF1 => val_f1,
        };
        let obs = stopper.observe(epoch + 1, value);
        if obs.improved {
            best_model = model.clone();
        }
        if obs.stop {
            stopped_epoch = epoch + 1;
            break;
        }
    }

    // Restore the best parameters but keep the caller's freeze flags.
    let freeze = model.freeze_state();
    *model = best_model;
    model.set_freeze(freeze);
    model.zero_grad();
    let (best_epoch, best_value) = stopper.best().unwrap_or((0, f64::NAN));
    Ok(FitOutcome {
        history,
        best_epoch,
        best_value,
        stopped_epoch,
    })
}
