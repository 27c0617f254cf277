//! Experiment grids: seeding, matched subsets, parallel execution and the
//! files each run leaves behind.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! metrics.csv      one row per run
//! stats.csv        paired signed-rank tests against baseline
//! timing.csv       wall-clock seconds per run
//! table4.csv, fig4.csv, contingency.csv   (see `report`)
//! runs/<approach>/f<permille>/r<run_id>/
//!     history.csv  best.ckpt  predictions_test.csv
//! ```
//!
//! Everything except `timing.csv` is a pure function of the config.

pub mod config;
pub mod report;
pub mod seeds;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::checkpoint;
use crate::data::{fractional_sample, load_dataset, Dataset, EmbeddingRecord};
use crate::error::{Result, StiltError};
use crate::metrics::MetricReport;
use crate::model::ModelConfig;
use crate::rng::DeterministicRng;
use crate::synthetic::{generate_synthetic, write_suite};
use crate::training::{run_protocol, EpochRecord, Prediction, ProtocolKind, ProtocolSpec};

pub use config::{fraction_key, DataPaths, DataSource, ExperimentConfig, ExperimentKind};
pub use report::{report, ReportSummary};
pub use seeds::{derive_seed, run_seed, subset_fingerprint, subset_seed};

/// The corpora one experiment draws from.
#[derive(Clone, Debug)]
pub struct Corpora {
    pub memes: Dataset,
    pub images: Option<Dataset>,
    pub texts: Option<Dataset>,
}

impl Corpora {
    fn intermediate(&self, kind: ProtocolKind) -> Option<&Dataset> {
        match kind {
            ProtocolKind::Baseline => None,
            ProtocolKind::ImageStilt => self.images.as_ref(),
            ProtocolKind::TextStilt => self.texts.as_ref(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub approach: ProtocolKind,
    pub fraction: f64,
    pub run_id: usize,
    pub seed: u64,
    pub subset_fingerprint: String,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: MetricReport,
    pub accuracy: f64,
    pub stages: Vec<Vec<EpochRecord>>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub runs: Vec<RunRecord>,
    pub report: ReportSummary,
}

/// Directory of one run relative to the experiment root.
pub fn run_dir(approach: ProtocolKind, fraction: f64, run_id: usize) -> PathBuf {
    PathBuf::from("runs")
        .join(approach.as_str())
        .join(format!("f{:04}", fraction_key(fraction)))
        .join(format!("r{run_id:02}"))
}

/// Loads or generates the datasets named by the config and checks that each
/// configured approach has what it needs.
pub fn load_corpora(cfg: &ExperimentConfig) -> Result<Corpora> {
    let corpora = match &cfg.data {
        DataSource::Synthetic(spec) => {
            let suite = generate_synthetic(spec)?;
            write_suite(&suite, &cfg.output_dir.join("data"))?;
            Corpora {
                memes: suite.memes,
                images: Some(suite.images),
                texts: Some(suite.texts),
            }
        }
        DataSource::Files(paths) => {
            let wants = |k| cfg.approaches.contains(&k);
            let opt = |k, p: &Option<PathBuf>| -> Result<Option<Dataset>> {
                match p {
                    Some(p) if wants(k) => load_dataset(p).map(Some),
                    _ => Ok(None),
                }
            };
            Corpora {
                memes: load_dataset(&paths.memes)?,
                images: opt(ProtocolKind::ImageStilt, &paths.images)?,
                texts: opt(ProtocolKind::TextStilt, &paths.texts)?,
            }
        }
    };
    for &k in &cfg.approaches {
        if k != ProtocolKind::Baseline && corpora.intermediate(k).is_none() {
            return Err(StiltError::Config(format!("{k} has no intermediate dataset")));
        }
    }
    Ok(corpora)
}

struct Job {
    approach: ProtocolKind,
    fraction: f64,
    run_id: usize,
    subset: usize,
}

struct Subset {
    records: Vec<EmbeddingRecord>,
    fingerprint: String,
}

/// Runs the whole grid described by `cfg` and writes every report file.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let corpora = load_corpora(cfg)?;
    run_with_corpora(cfg, &corpora)
}

pub fn run_with_corpora(cfg: &ExperimentConfig, corpora: &Corpora) -> Result<RunOutput> {
    cfg.validate()?;
    let model_config = cfg.model_config(corpora.memes.manifest.dimension)?;
    // Fail before any training if any run's spec is unusable.
    for &k in &cfg.approaches {
        crate::training::protocol::validate_spec(&ProtocolSpec {
            kind: k,
            memes: &corpora.memes,
            meme_train: &corpora.memes.train,
            intermediate: corpora.intermediate(k),
            model_config: &model_config,
            meme_config: &cfg.meme_train,
            intermediate_config: &cfg.intermediate_train,
            seed: 0,
        })?;
    }

    let mut subsets = Vec::new();
    let mut jobs = Vec::new();
    for &fraction in &cfg.fractions {
        for run_id in 0..cfg.restarts {
            let seed = subset_seed(cfg.master_seed, fraction_key(fraction), run_id);
            let records =
                fractional_sample(&corpora.memes.train, fraction, &mut DeterministicRng::new(seed))?;
            let fingerprint = subset_fingerprint(records.iter().map(|r| r.id.as_str()));
            subsets.push(Subset { records, fingerprint });
            for &approach in &cfg.approaches {
                jobs.push(Job {
                    approach,
                    fraction,
                    run_id,
                    subset: subsets.len() - 1,
                });
            }
        }
    }

    fs::create_dir_all(&cfg.output_dir).map_err(|e| StiltError::io(&cfg.output_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel_runs)
        .build()
        .map_err(|e| StiltError::Config(format!("thread pool: {e}")))?;
    let runs: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|job| execute(cfg, corpora, &model_config, job, &subsets[job.subset]))
            .collect::<Result<_>>()
    })?;

    write_file(&cfg.output_dir.join("metrics.csv"), &metrics_csv(&runs))?;
    write_file(&cfg.output_dir.join("timing.csv"), &timing_csv(&runs))?;
    let report = report(&cfg.output_dir)?;
    Ok(RunOutput { runs, report })
}

fn execute(
    cfg: &ExperimentConfig,
    corpora: &Corpora,
    model_config: &ModelConfig,
    job: &Job,
    subset: &Subset,
) -> Result<RunRecord> {
    let start = Instant::now();
    let seed = run_seed(cfg.master_seed, job.approach, fraction_key(job.fraction), job.run_id);
    let outcome = run_protocol::<f64>(&ProtocolSpec {
        kind: job.approach,
        memes: &corpora.memes,
        meme_train: &subset.records,
        intermediate: corpora.intermediate(job.approach),
        model_config,
        meme_config: &cfg.meme_train,
        intermediate_config: &cfg.intermediate_train,
        seed,
    })?;

    let dir = cfg.output_dir.join(run_dir(job.approach, job.fraction, job.run_id));
    fs::create_dir_all(&dir).map_err(|e| StiltError::io(&dir, e))?;
    write_file(&dir.join("history.csv"), &history_csv(outcome.history()))?;
    write_file(&dir.join("predictions_test.csv"), &predictions_csv(&outcome.test_predictions)?)?;
    checkpoint::save(&outcome.model, &dir.join("best.ckpt"))?;

    let correct = outcome
        .test_predictions
        .iter()
        .filter(|p| p.label == p.predicted)
        .count();
    let n_test = outcome.test_predictions.len();
    Ok(RunRecord {
        approach: job.approach,
        fraction: job.fraction,
        run_id: job.run_id,
        seed,
        subset_fingerprint: subset.fingerprint.clone(),
        n_train: subset.records.len(),
        n_test,
        metrics: outcome.metrics,
        accuracy: correct as f64 / n_test as f64,
        stages: outcome.stages,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| StiltError::io(path, e))
}

pub const METRICS_HEADER: &str = "approach,fraction,run_id,seed,subset_fingerprint,n_train,n_test,weighted_f1,weighted_precision,weighted_recall,accuracy";

fn metrics_csv(runs: &[RunRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in runs {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.approach,
            r.fraction,
            r.run_id,
            r.seed,
            r.subset_fingerprint,
            r.n_train,
            r.n_test,
            r.metrics.weighted_f1,
            r.metrics.weighted_precision,
            r.metrics.weighted_recall,
            r.accuracy
        )
        .unwrap();
    }
    s
}

fn timing_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from("approach,fraction,run_id,wall_seconds\n");
    for r in runs {
        writeln!(s, "{},{},{},{:.3}", r.approach, r.fraction, r.run_id, r.wall_seconds).unwrap();
    }
    s
}

fn history_csv<'a>(history: impl Iterator<Item = &'a EpochRecord>) -> String {
    let mut s = String::from(
        "epoch,stage,train_loss,val_loss,val_weighted_f1,lr,image_adapter_grad_norm,text_adapter_grad_norm\n",
    );
    for e in history {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            e.epoch,
            e.stage,
            e.train_loss,
            e.val_loss,
            e.val_weighted_f1,
            e.lr,
            e.image_adapter_grad_norm,
            e.text_adapter_grad_norm
        )
        .unwrap();
    }
    s
}

fn predictions_csv(preds: &[Prediction]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| StiltError::Contract(format!("csv encoding: {e}"));
    w.write_record(["id", "label", "predicted", "logit_0", "logit_1", "logit_2"])
        .map_err(io)?;
    for p in preds {
        w.write_record([
            p.id.clone(),
            p.label.to_string(),
            p.predicted.to_string(),
            p.logits[0].to_string(),
            p.logits[1].to_string(),
            p.logits[2].to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| StiltError::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 in, utf-8 out"))
}
