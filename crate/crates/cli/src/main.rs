use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use stilt_core::gradcheck::{run_model_suite, GradCheckOptions};
use stilt_core::runner::{report, run_experiment, ExperimentConfig};
use stilt_core::synthetic::{generate_synthetic, write_suite, SyntheticSpec};
use stilt_core::StiltError;

/// Maximum relative error the gradient oracle accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "stilt-bench", version, about = "Multimodal STILT benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic meme, image-only and text-only datasets.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rebuild the aggregate reports of a finished run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Check analytic gradients of random small models against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        models: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Core(StiltError),
    Usage(String),
    Check(String),
}

impl From<StiltError> for Failure {
    fn from(e: StiltError) -> Self {
        Failure::Core(e)
    }
}

fn execute(cmd: Command) -> Result<serde_json::Value, Failure> {
    match cmd {
        Command::Gen { spec, out } => {
            let spec = SyntheticSpec::load(&spec)?;
            let suite = generate_synthetic(&spec)?;
            let paths = write_suite(&suite, &out)?;
            Ok(json!({
                "memes": paths.memes,
                "images": paths.images,
                "texts": paths.texts,
                "records": suite.memes.records().count()
                    + suite.images.records().count()
                    + suite.texts.records().count(),
            }))
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = run_experiment(&cfg)?;
            Ok(json!({
                "experiment": cfg.experiment.as_str(),
                "runs": out.runs.len(),
                "output_dir": cfg.output_dir,
                "tests": out.report.comparisons.iter().map(|c| json!({
                    "comparison": c.name(),
                    "scope": c.scope,
                    "n": c.n_pairs,
                    "p": c.result.map(|t| t.p_two_sided),
                })).collect::<Vec<_>>(),
            }))
        }
        Command::Report { dir } => {
            let summary = report(&dir)?;
            Ok(json!({ "runs": summary.rows.len(), "files": summary.files }))
        }
        Command::Gradcheck { models, seed } => {
            if models == 0 {
                return Err(Failure::Usage("--models must be >= 1".into()));
            }
            let r = run_model_suite(models, seed, &GradCheckOptions::default())?;
            let body = json!({
                "models": r.models,
                "coordinates": r.coordinates_checked,
                "max_rel_error": r.max_rel_error,
                "tolerance": GRADCHECK_TOLERANCE,
                "worst_seed": r.worst_seed,
                "worst_tensor": r.worst.as_ref().map(|w| &w.0),
            });
            if r.max_rel_error < GRADCHECK_TOLERANCE {
                Ok(body)
            } else {
                Err(Failure::Check(body.to_string()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            eprintln!("{}", json!({ "error": msg, "kind": "usage", "detail": e.to_string() }));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            let (kind, msg) = match f {
                Failure::Core(e) => (e.kind(), e.to_string()),
                Failure::Usage(m) => ("usage", m),
                Failure::Check(m) => ("gradcheck_failed", m),
            };
            eprintln!("{}", json!({ "error": msg, "kind": kind }));
            ExitCode::FAILURE
        }
    }
}
