//! Experiment configuration as read from a TOML document.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::SWEEP_FRACTIONS;
use crate::error::{Result, StiltError};
use crate::model::ModelConfig;
use crate::synthetic::SyntheticSpec;
use crate::training::{ProtocolKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Rq1,
    Rq2,
    Single,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Rq1 => "rq1",
            ExperimentKind::Rq2 => "rq2",
            ExperimentKind::Single => "single",
        }
    }

    fn default_restarts(self) -> usize {
        match self {
            ExperimentKind::Rq1 => 10,
            ExperimentKind::Rq2 => 5,
            ExperimentKind::Single => 1,
        }
    }
}

/// Dataset manifests on disk. `images`/`texts` are only needed by the
/// protocols that train on them.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub memes: PathBuf,
    pub images: Option<PathBuf>,
    pub texts: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Files(DataPaths),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: ExperimentKind,
    approaches: Option<Vec<ProtocolKind>>,
    restarts: Option<usize>,
    fractions: Option<Vec<f64>>,
    master_seed: u64,
    output_dir: PathBuf,
    parallel_runs: Option<usize>,
    data: Option<DataPaths>,
    synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    meme_train: toml::Table,
    #[serde(default)]
    intermediate_train: toml::Table,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Always in canonical order: baseline, image_stilt, text_stilt.
    pub approaches: Vec<ProtocolKind>,
    pub restarts: usize,
    pub fractions: Vec<f64>,
    pub data: DataSource,
    /// Keys given under `[model]`; `dim` and `fused_dim` default to the
    /// dataset dimension once it is known.
    pub model: toml::Table,
    pub meme_train: TrainConfig,
    pub intermediate_train: TrainConfig,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub parallel_runs: usize,
}

fn overlay<T: serde::Serialize + serde::de::DeserializeOwned>(
    base: &T,
    table: &toml::Table,
    section: &str,
) -> Result<T> {
    let mut merged = toml::Table::try_from(base)
        .map_err(|e| StiltError::Config(format!("[{section}]: {e}")))?;
    for (k, v) in table {
        merged.insert(k.clone(), v.clone());
    }
    merged
        .try_into()
        .map_err(|e| StiltError::Config(format!("[{section}]: {e}")))
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Parses a config document. Relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| StiltError::Config(e.to_string()))?;
        let data = match (raw.data, raw.synthetic) {
            (Some(d), None) => DataSource::Files(DataPaths {
                memes: resolve(base_dir, d.memes),
                images: d.images.map(|p| resolve(base_dir, p)),
                texts: d.texts.map(|p| resolve(base_dir, p)),
            }),
            (None, Some(s)) => DataSource::Synthetic(s),
            (Some(_), Some(_)) => {
                return Err(StiltError::Config("give either [data] or [synthetic], not both".into()))
            }
            (None, None) => {
                return Err(StiltError::Config("missing [data] or [synthetic] section".into()))
            }
        };
        let mut approaches = raw.approaches.unwrap_or_else(|| ProtocolKind::ALL.to_vec());
        approaches.sort();
        approaches.dedup();
        let fractions = raw.fractions.unwrap_or_else(|| match raw.experiment {
            ExperimentKind::Rq2 => SWEEP_FRACTIONS.to_vec(),
            _ => vec![1.0],
        });
        let cfg = ExperimentConfig {
            experiment: raw.experiment,
            approaches,
            restarts: raw.restarts.unwrap_or(raw.experiment.default_restarts()),
            fractions,
            data,
            model: raw.model,
            meme_train: overlay(&TrainConfig::memes(), &raw.meme_train, "meme_train")?,
            intermediate_train: overlay(
                &TrainConfig::unimodal(),
                &raw.intermediate_train,
                "intermediate_train",
            )?,
            master_seed: raw.master_seed,
            output_dir: resolve(base_dir, raw.output_dir),
            parallel_runs: raw.parallel_runs.unwrap_or(1),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StiltError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            StiltError::Config(m) => StiltError::Parse {
                path: path.to_path_buf(),
                reason: m,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StiltError::Config(m));
        if self.approaches.is_empty() {
            return bad("approaches must not be empty".into());
        }
        if self.restarts < 1 {
            return bad("restarts must be >= 1".into());
        }
        if self.parallel_runs < 1 {
            return bad("parallel_runs must be >= 1".into());
        }
        if self.fractions.is_empty() {
            return bad("fractions must not be empty".into());
        }
        let mut keys = Vec::new();
        for &f in &self.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("fraction {f} is outside (0, 1]"));
            }
            keys.push(fraction_key(f));
        }
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return bad("fractions must be distinct at 0.1% resolution".into());
        }
        match self.experiment {
            ExperimentKind::Rq1 => {
                if self.fractions != [1.0] {
                    return bad("rq1 runs on the full meme training set; fractions must be [1.0]".into());
                }
                if self.approaches != ProtocolKind::ALL {
                    return bad("rq1 needs all three approaches".into());
                }
            }
            ExperimentKind::Rq2 => {
                if !self.approaches.contains(&ProtocolKind::Baseline) || self.approaches.len() < 2 {
                    return bad("rq2 needs baseline and at least one STILT approach".into());
                }
            }
            ExperimentKind::Single => {}
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        if let DataSource::Files(d) = &self.data {
            for (kind, path, what) in [
                (ProtocolKind::ImageStilt, &d.images, "images"),
                (ProtocolKind::TextStilt, &d.texts, "texts"),
            ] {
                if self.approaches.contains(&kind) && path.is_none() {
                    return bad(format!("{kind} needs data.{what}"));
                }
            }
        }
        self.meme_train.validate()?;
        if self.approaches.iter().any(|k| *k != ProtocolKind::Baseline) {
            self.intermediate_train.validate()?;
        }
        Ok(())
    }

    /// Model hyperparameters for embeddings of width `dim`.
    pub fn model_config(&self, dim: usize) -> Result<ModelConfig> {
        let base = ModelConfig {
            dim,
            fused_dim: dim,
            ..ModelConfig::default()
        };
        let cfg: ModelConfig = overlay(&base, &self.model, "model")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fraction in tenths of a percent; used for directory names and seeds.
pub fn fraction_key(f: f64) -> u32 {
    (f * 1000.0).round() as u32
}
