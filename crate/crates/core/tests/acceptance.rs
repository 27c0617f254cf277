//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use stilt_core::data::{class_counts, fractional_sample_indices, ClassCounts, SWEEP_FRACTIONS};
use stilt_core::gradcheck::{run_model_suite, GradCheckOptions};
use stilt_core::metrics::evaluate;
use stilt_core::model::{Batch, Model, ModelConfig};
use stilt_core::ops::Mode;
use stilt_core::runner::{run_experiment, ExperimentConfig};
use stilt_core::stats::wilcoxon_from_differences;
use stilt_core::synthetic::{generate_synthetic, MemeCounts, SyntheticSpec};
use stilt_core::tensor::Matrix;
use stilt_core::training::{run_protocol, weighted_ce_loss, LossWeights, ProtocolKind, ProtocolSpec, TrainConfig};
use stilt_core::DeterministicRng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs()))
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let r = run_model_suite(20, 0, &GradCheckOptions::default()).map_err(|e| e.to_string())?;
    ensure(r.max_rel_error < 1e-6, || format!("max rel error {:e} ({:?})", r.max_rel_error, r.worst))?;
    within(Duration::from_secs(30), start)?;
    Ok(format!("20 models, {} coordinates, max rel error {:.2e}", r.coordinates_checked, r.max_rel_error))
}

fn metric_oracle() -> Outcome {
    let mut rng = DeterministicRng::new(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 1 + (rng.uniform() * 200.0) as usize;
        let labels: Vec<usize> = (0..n).map(|_| (rng.uniform() * 3.0) as usize).collect();
        let preds: Vec<usize> = (0..n).map(|_| (rng.uniform() * 3.0) as usize).collect();
        let r = evaluate(&labels, &preds).map_err(|e| e.to_string())?;
        let (f1, p, rc) = common::brute_force_weighted(&labels, &preds);
        worst = worst
            .max((r.weighted_f1 - f1).abs())
            .max((r.weighted_precision - p).abs())
            .max((r.weighted_recall - rc).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    let hand = evaluate(&[2, 2, 1, 0], &[2, 1, 1, 0]).map_err(|e| e.to_string())?.weighted_f1;
    ensure(hand == 0.75, || format!("hand case gave {hand}"))?;
    Ok(format!("1000 instances, max deviation {worst:.1e}; hand case 0.75"))
}

fn wilcoxon_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = DeterministicRng::new(3);
    let mut checked = 0;
    while checked < 500 {
        let n = 1 + (rng.uniform() * 12.0) as usize;
        let d: Vec<f64> = (0..n).map(|_| ((rng.uniform() * 9.0) as i64 - 4) as f64 / 8.0).collect();
        let Some((_, p)) = common::enumerated_wilcoxon_p(&d) else { continue };
        let t = wilcoxon_from_differences(&d).map_err(|e| e.to_string())?;
        ensure(t.p_two_sided == p || (t.p_two_sided - p).abs() < 1e-12, || {
            format!("{d:?}: {} vs enumeration {p}", t.p_two_sided)
        })?;
        checked += 1;
    }
    let p = |d: &[f64]| wilcoxon_from_differences(d).map(|t| t.p_two_sided).map_err(|e| e.to_string());
    ensure(p(&[1.0, 2.0, 3.0])? == 0.25, || "d=(1,2,3)".into())?;
    ensure(p(&[1.0, -1.0])? == 1.0, || "d=(1,-1)".into())?;
    within(Duration::from_secs(60), start)?;
    Ok("500 instances match enumeration; p(1,2,3)=0.25, p(1,-1)=1".into())
}

fn fusion_invariant() -> Outcome {
    let cfg = ModelConfig { dim: 8, fused_dim: 8, attention_hidden: vec![16, 8, 4], head_hidden: vec![16, 8], ..Default::default() };
    let mut rng = DeterministicRng::new(4);
    let mut model = Model::<f64>::init(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let (mut score_dev, mut shifted_dev, mut max_fmm) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..10_000 {
        if i % 100 == 0 {
            model = Model::<f64>::init(&cfg, &mut rng).map_err(|e| e.to_string())?;
        }
        let scale = rng.uniform_range(0.1, 3.0);
        let mut m = || Matrix::from_vec(2, 8, (0..16).map(|_| scale * rng.standard_normal()).collect()).unwrap();
        let batch = Batch::new(m(), m()).unwrap();
        let mode = if i % 2 == 0 { Mode::Train } else { Mode::Eval };
        let t = model.forward(&batch, mode, 0.2, &mut rng).map_err(|e| e.to_string())?;
        for r in 0..2 {
            score_dev = score_dev.max((t.scores.get(r, 0) + t.scores.get(r, 1) - 1.0).abs());
            shifted_dev = shifted_dev.max((t.shifted_scores.get(r, 0) + t.shifted_scores.get(r, 1) - 3.0).abs());
        }
        max_fmm = max_fmm.max(t.fused_raw.max_abs());
    }
    ensure(score_dev <= 1e-12 && shifted_dev <= 1e-12, || format!("deviations {score_dev:e}, {shifted_dev:e}"))?;
    ensure(max_fmm < 1.0, || format!("|F_MM| reached {max_fmm}"))?;
    Ok(format!("10^4 forwards; max |s-sum - 1| {score_dev:.1e}, min margin of F_MM to ±1 {:.1e}", 1.0 - max_fmm))
}

fn loss_sanity() -> Outcome {
    let mut rng = DeterministicRng::new(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let w = LossWeights([rng.uniform_range(0.01, 1.0), rng.uniform_range(0.01, 1.0), rng.uniform_range(0.01, 1.0)]);
        let labels: Vec<usize> = (0..7).map(|_| (rng.uniform() * 3.0) as usize).collect();
        let (l, _) = weighted_ce_loss(&Matrix::<f64>::zeros(7, 3), &labels, &w).map_err(|e| e.to_string())?;
        worst = worst.max((l - 3f64.ln()).abs());
    }
    ensure(worst <= 1e-12, || format!("uniform-logit loss off by {worst:e}"))?;
    let w = LossWeights::from_counts(&ClassCounts([172, 584, 1517])).map_err(|e| e.to_string())?;
    let expected = [0.9243, 0.7431, 0.3326];
    ensure(w.0.iter().zip(expected).all(|(a, b)| (a - b).abs() <= 5e-5), || format!("weights {:?}", w.0))?;
    Ok(format!("ln3 within {worst:.1e}; weights ({:.4}, {:.4}, {:.4})", w.0[0], w.0[1], w.0[2]))
}

fn sampler() -> Outcome {
    let records = common::imbalanced_records([800, 100, 100], 1, 6);
    let source = common::entropy(&class_counts(&records).0);
    let mut lowest_margin = f64::INFINITY;
    for &f in &SWEEP_FRACTIONS {
        let want = (f * 1000.0_f64).round() as usize;
        let mut entropy_sum = 0.0;
        for seed in 0..1000u64 {
            let idx = fractional_sample_indices(&records, f, &mut DeterministicRng::new(seed)).map_err(|e| e.to_string())?;
            ensure(idx.len() == want, || format!("fraction {f}: size {} != {want}", idx.len()))?;
            let unique: HashSet<usize> = idx.iter().copied().collect();
            ensure(unique.len() == idx.len(), || format!("fraction {f} seed {seed}: duplicates"))?;
            entropy_sum += common::entropy(&class_counts(idx.iter().map(|&i| &records[i])).0);
        }
        let mean = entropy_sum / 1000.0;
        ensure(mean > source, || format!("fraction {f}: mean entropy {mean} <= source {source}"))?;
        lowest_margin = lowest_margin.min(mean - source);
    }
    Ok(format!("9 fractions x 1000 seeds exact and unique; entropy gain >= {lowest_margin:.3} nats over {source:.3}"))
}

fn convergence() -> Outcome {
    let start = Instant::now();
    let suite = generate_synthetic(&SyntheticSpec {
        seed: 7,
        dimension: 16,
        memes: MemeCounts { train: [100, 100, 100], val: [20, 20, 20], test: [20, 20, 20] },
        images: [0, 0, 0],
        texts: [0, 0, 0],
        image_signal: 1.0,
        text_signal: 1.0,
        noise_scale: 0.0,
        domain_shift: 0.0,
    })
    .map_err(|e| e.to_string())?;
    let cfg = ModelConfig::with_dims(16, 16);
    let tc = TrainConfig::memes();
    let out = run_protocol::<f64>(&ProtocolSpec {
        kind: ProtocolKind::Baseline,
        memes: &suite.memes,
        meme_train: &suite.memes.train,
        intermediate: None,
        model_config: &cfg,
        meme_config: &tc,
        intermediate_config: &tc,
        seed: 3,
    })
    .map_err(|e| e.to_string())?;
    let epochs = out.stages[0].len();
    ensure(out.metrics.weighted_f1 == 1.0, || format!("test F1 {}", out.metrics.weighted_f1))?;
    ensure(epochs <= 40, || format!("{epochs} epochs"))?;
    within(Duration::from_secs(120), start)?;
    Ok(format!("test F1 1.0 with {epochs} of 40 epochs run"))
}

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mean_f1(rows: &[(ProtocolKind, f64)], kind: ProtocolKind) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.0 == kind).map(|r| r.1).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn directional() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::load(&configs_dir().join("directional.toml")).map_err(|e| e.to_string())?;
    cfg.output_dir = tmp.path().join("out");
    let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
    ensure(out.runs.len() == 10, || format!("{} runs", out.runs.len()))?;
    let rows: Vec<(ProtocolKind, f64)> = out.runs.iter().map(|r| (r.approach, r.metrics.weighted_f1)).collect();
    let base = mean_f1(&rows, ProtocolKind::Baseline);
    let text = mean_f1(&rows, ProtocolKind::TextStilt);
    ensure(text > base, || format!("Text-STILT {text:.4} <= Baseline {base:.4}"))?;
    within(Duration::from_secs(600), start)?;
    let p = out.report.comparisons[0].result.map(|t| t.p_two_sided).unwrap_or(f64::NAN);
    Ok(format!("mean F1 Text-STILT {text:.4} > Baseline {base:.4} (p={p}), {:.0}s", start.elapsed().as_secs_f64()))
}

/// Fast config for grid-shape and determinism checks.
fn tiny_config(experiment: &str, extra: &str, out: &Path, parallel: usize) -> ExperimentConfig {
    let text = format!(
        r#"
experiment = "{experiment}"
master_seed = 19
output_dir = "{}"
parallel_runs = {parallel}
{extra}

[synthetic]
seed = 8
dimension = 6
images = [12, 12, 12]
texts = [12, 12, 12]
image_signal = 1.0
text_signal = 2.0
noise_scale = 1.0
domain_shift = 0.3

[synthetic.memes]
train = [20, 20, 20]
val = [5, 5, 5]
test = [8, 8, 8]

[model]
attention_hidden = [4]
head_hidden = [8]

[meme_train]
max_epochs = 2
batch_size = 16
lr_max = 1e-3
lr_min = 1e-4

[intermediate_train]
max_epochs = 1
batch_size = 16
lr_max = 1e-3
lr_min = 1e-4
"#,
        out.display()
    );
    ExperimentConfig::from_toml_str(&text, out).expect("valid test config")
}

fn files_under(dir: &Path, out: &mut BTreeMap<String, Vec<u8>>, root: &Path) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files_under(&p, out, root);
        } else if p.extension().is_some_and(|x| x == "ckpt") {
            out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
        }
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let extra = "restarts = 2\nfractions = [0.5, 0.8]";
    let dirs: Vec<_> = [1usize, 3, 3]
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let d = tmp.path().join(format!("run{i}"));
            run_experiment(&tiny_config("rq2", extra, &d, k)).map(|_| d).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    let mut ckpts = Vec::new();
    for d in &dirs {
        let mut m = BTreeMap::new();
        files_under(&d.join("runs"), &mut m, d);
        ckpts.push(m);
    }
    for d in &dirs[1..] {
        for f in ["metrics.csv", "stats.csv"] {
            ensure(fs::read(dirs[0].join(f)).ok() == fs::read(d.join(f)).ok(), || format!("{f} differs"))?;
        }
    }
    ensure(ckpts[0].len() == 12, || format!("{} checkpoints", ckpts[0].len()))?;
    ensure(ckpts.iter().all(|c| *c == ckpts[0]), || "checkpoints differ".into())?;
    Ok("3 runs (parallel_runs 1, 3, 3): metrics.csv, stats.csv and 12 checkpoints byte-identical".into())
}

fn protocol_shape() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rq1 = run_experiment(&tiny_config("rq1", "", &tmp.path().join("rq1"), 1)).map_err(|e| e.to_string())?;
    ensure(rq1.runs.len() == 30, || format!("rq1: {} runs", rq1.runs.len()))?;
    let tests: Vec<_> = rq1.report.comparisons.iter().map(|c| (c.name(), c.scope.clone(), c.n_pairs)).collect();
    ensure(
        tests
            == [
                ("baseline_vs_image_stilt".to_string(), "all".to_string(), 10),
                ("baseline_vs_text_stilt".to_string(), "all".to_string(), 10),
            ],
        || format!("rq1 tests {tests:?}"),
    )?;

    let rq2 = run_experiment(&tiny_config("rq2", "", &tmp.path().join("rq2"), 1)).map_err(|e| e.to_string())?;
    for kind in ProtocolKind::ALL {
        let n = rq2.runs.iter().filter(|r| r.approach == kind).count();
        ensure(n == 45, || format!("rq2: {kind} has {n} runs"))?;
    }
    let mut fps: BTreeMap<(u32, usize), HashSet<&str>> = BTreeMap::new();
    for r in &rq2.runs {
        fps.entry(((r.fraction * 1000.0).round() as u32, r.run_id)).or_default().insert(&r.subset_fingerprint);
    }
    ensure(fps.len() == 45 && fps.values().all(|s| s.len() == 1), || "subset fingerprints not shared".into())?;
    for c in &rq2.report.comparisons {
        let want = if c.scope == "all" { 45 } else { 20 };
        ensure(c.n_pairs == want, || format!("{} {}: n={}", c.name(), c.scope, c.n_pairs))?;
    }
    ensure(rq2.report.comparisons.iter().filter(|c| c.scope == "band_50_80").count() == 2, || "band tests missing".into())?;
    Ok("rq1: 30 runs, 2 tests n=10; rq2: 45 runs/approach, shared fingerprints, pooled n=45, band n=20".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient oracle", gradient_oracle),
        ("metric oracle", metric_oracle),
        ("wilcoxon oracle", wilcoxon_oracle),
        ("fusion invariant", fusion_invariant),
        ("loss sanity", loss_sanity),
        ("sampler", sampler),
        ("convergence", convergence),
        ("directional stilt effect", directional),
        ("determinism", determinism),
        ("protocol shape", protocol_shape),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{:>2}] {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
