//! Baseline, Image-STILT and Text-STILT training protocols.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EmbeddingRecord};
use crate::error::{Result, StiltError};
use crate::metrics::{self, MetricReport};
use crate::model::{FreezeSpec, Model, ModelConfig};
use crate::rng::DeterministicRng;
use crate::scalar::Scalar;
use crate::training::fit::{argmax_rows, fit, predict_in_chunks, EpochRecord, StageInput};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Baseline,
    ImageStilt,
    TextStilt,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 3] = [
        ProtocolKind::Baseline,
        ProtocolKind::ImageStilt,
        ProtocolKind::TextStilt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::Baseline => "baseline",
            ProtocolKind::ImageStilt => "image_stilt",
            ProtocolKind::TextStilt => "text_stilt",
        }
    }

    /// Adapter frozen during the intermediate stage, if any.
    pub fn intermediate_freeze(self) -> Option<FreezeSpec> {
        match self {
            ProtocolKind::Baseline => None,
            ProtocolKind::ImageStilt => Some(FreezeSpec {
                freeze_image_adapter: false,
                freeze_text_adapter: true,
            }),
            ProtocolKind::TextStilt => Some(FreezeSpec {
                freeze_image_adapter: true,
                freeze_text_adapter: false,
            }),
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolKind {
    type Err = StiltError;

    fn from_str(s: &str) -> Result<Self> {
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| StiltError::Config(format!("unknown approach {s:?}")))
    }
}

/// Everything needed for one protocol run.
#[derive(Clone, Debug)]
pub struct ProtocolSpec<'a> {
    pub kind: ProtocolKind,
    /// Meme dataset; its `val` and `test` splits are always used in full.
    pub memes: &'a Dataset,
    /// Meme training records for this run (possibly a fractional subset).
    pub meme_train: &'a [EmbeddingRecord],
    /// Unimodal corpus; its `train` split drives the intermediate stage.
    pub intermediate: Option<&'a Dataset>,
    pub model_config: &'a ModelConfig,
    pub meme_config: &'a TrainConfig,
    pub intermediate_config: &'a TrainConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub logits: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct ProtocolOutcome<T> {
    pub model: Model<T>,
    /// One entry per fit stage, in execution order.
    pub stages: Vec<Vec<EpochRecord>>,
    pub test_predictions: Vec<Prediction>,
    pub metrics: MetricReport,
}

impl<T> ProtocolOutcome<T> {
    pub fn history(&self) -> impl Iterator<Item = &EpochRecord> {
        self.stages.iter().flatten()
    }
}

fn check_intermediate(kind: ProtocolKind, ds: &Dataset) -> Result<()> {
    let want_image = kind == ProtocolKind::ImageStilt;
    if ds.train.is_empty() {
        return Err(StiltError::Config(format!(
            "{kind}: intermediate dataset {:?} has no train records",
            ds.manifest.name
        )));
    }
    if let Some(bad) = ds.train.iter().find(|r| {
        r.image_embedding.is_some() != want_image || r.text_embedding.is_some() == want_image
    }) {
        let what = if want_image { "image-only" } else { "text-only" };
        return Err(StiltError::Config(format!(
            "{kind}: intermediate data must be {what}; record {:?} is not",
            bad.id
        )));
    }
    Ok(())
}

pub fn validate_spec(spec: &ProtocolSpec<'_>) -> Result<()> {
    spec.model_config.validate()?;
    spec.meme_config.validate()?;
    if spec.memes.manifest.dimension != spec.model_config.dim {
        return Err(StiltError::dim(
            "protocol",
            format!("meme dimension {}", spec.memes.manifest.dimension),
            format!("model dim {}", spec.model_config.dim),
        ));
    }
    if spec.kind != ProtocolKind::Baseline {
        spec.intermediate_config.validate()?;
        let ds = spec.intermediate.ok_or_else(|| {
            StiltError::Config(format!("{} needs an intermediate dataset", spec.kind))
        })?;
        check_intermediate(spec.kind, ds)?;
        if ds.manifest.dimension != spec.model_config.dim {
            return Err(StiltError::dim(
                "protocol",
                format!("intermediate dimension {}", ds.manifest.dimension),
                format!("model dim {}", spec.model_config.dim),
            ));
        }
    }
    Ok(())
}

/// Runs one protocol end to end and scores the final model on the meme
/// test split.
pub fn run_protocol<T: Scalar>(spec: &ProtocolSpec<'_>) -> Result<ProtocolOutcome<T>> {
    validate_spec(spec)?;
    let mut init_rng = DeterministicRng::with_stream(spec.seed, 0);
    let mut model = Model::<T>::init(spec.model_config, &mut init_rng)?;
    let val = StageInput::new(&spec.memes.val, &spec.memes.manifest);
    let mut stages = Vec::new();

    if let Some(freeze) = spec.kind.intermediate_freeze() {
        let ds = spec.intermediate.expect("validated");
        model.set_freeze(freeze);
        let mut rng = DeterministicRng::with_stream(spec.seed, 1);
        let out = fit(
            &mut model,
            StageInput::new(&ds.train, &ds.manifest),
            val,
            spec.intermediate_config,
            "intermediate",
            &mut rng,
        )?;
        stages.push(out.history);
        model.set_freeze(FreezeSpec::default());
    }

    let mut rng = DeterministicRng::with_stream(spec.seed, 2);
    let out = fit(
        &mut model,
        StageInput::new(spec.meme_train, &spec.memes.manifest),
        val,
        spec.meme_config,
        "memes",
        &mut rng,
    )?;
    stages.push(out.history);

    let test = StageInput::new(&spec.memes.test, &spec.memes.manifest);
    if test.records.is_empty() {
        return Err(StiltError::Config("meme test split is empty".into()));
    }
    let logits = predict_in_chunks(&model, &test.batch::<T>()?)?;
    let predicted = argmax_rows(&logits);
    let labels = test.labels();
    let metrics = metrics::evaluate(&labels, &predicted)?;
    let test_predictions = test
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| Prediction {
            id: r.id.clone(),
            label: labels[i],
            predicted: predicted[i],
            logits: [
                logits.get(i, 0).to_f64_lossy(),
                logits.get(i, 1).to_f64_lossy(),
                logits.get(i, 2).to_f64_lossy(),
            ],
        })
        .collect();
    Ok(ProtocolOutcome {
        model,
        stages,
        test_predictions,
        metrics,
    })
}
