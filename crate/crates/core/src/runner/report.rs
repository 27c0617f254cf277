//! Aggregate reports over a finished run directory.
//!
//! Columns:
//!
//! * `stats.csv`: `comparison,scope,n_pairs,n_used,n_zero,w_plus,p_two_sided,method,note`.
//!   `scope` is `all` (every fraction pooled) or `band_50_80`.
//! * `table4.csv`: `fraction,approach,n,f1_mean,f1_std,precision_mean,precision_std,recall_mean,recall_std,p_vs_baseline`.
//! * `fig4.csv`: `fraction,approach,n,mean,std` of weighted F1.
//! * `contingency.csv`: each STILT approach's best run against the baseline
//!   run at the same fraction whose F1 is closest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{fraction_key, run_dir, write_file};
use crate::error::{Result, StiltError};
use crate::metrics::contingency;
use crate::stats::{summarize, wilcoxon_signed_rank, PairedSample, TestResult};
use crate::training::ProtocolKind;

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct MetricsRow {
    pub approach: ProtocolKind,
    pub fraction: f64,
    pub run_id: usize,
    pub seed: u64,
    pub subset_fingerprint: String,
    pub n_train: usize,
    pub n_test: usize,
    pub weighted_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub approach: ProtocolKind,
    pub scope: String,
    pub n_pairs: usize,
    /// `None` when every difference was zero.
    pub result: Option<TestResult>,
    pub note: String,
}

impl Comparison {
    pub fn name(&self) -> String {
        format!("baseline_vs_{}", self.approach)
    }
}

#[derive(Clone, Debug)]
pub struct ReportSummary {
    pub rows: Vec<MetricsRow>,
    pub comparisons: Vec<Comparison>,
    pub files: Vec<PathBuf>,
}

const RUN_FILES: [&str; 3] = ["history.csv", "best.ckpt", "predictions_test.csv"];

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRow>> {
    let path = dir.join("metrics.csv");
    if !path.is_file() {
        if dir.join("runs").is_dir() {
            return Err(StiltError::Incomplete {
                dir: dir.to_path_buf(),
                missing: vec!["metrics.csv".into()],
            });
        }
        return Err(StiltError::NoRuns(dir.to_path_buf()));
    }
    let parse = |e: csv::Error| StiltError::Parse {
        path: path.clone(),
        reason: e.to_string(),
    };
    let mut reader = csv::Reader::from_path(&path).map_err(parse)?;
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(parse)?;
    if rows.is_empty() {
        return Err(StiltError::NoRuns(dir.to_path_buf()));
    }
    Ok(rows)
}

#[derive(Deserialize)]
struct PredictionRow {
    id: String,
    label: usize,
    predicted: usize,
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let parse = |e: csv::Error| StiltError::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    csv::Reader::from_path(path)
        .map_err(parse)?
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(parse)
}

type PairKey = (u32, usize);

/// Baseline/approach score pairs keyed by `(fraction, run_id)`.
fn pairs_for(rows: &[MetricsRow], approach: ProtocolKind) -> Result<BTreeMap<PairKey, PairedSample>> {
    let base: BTreeMap<PairKey, &MetricsRow> = rows
        .iter()
        .filter(|r| r.approach == ProtocolKind::Baseline)
        .map(|r| ((fraction_key(r.fraction), r.run_id), r))
        .collect();
    let mut out = BTreeMap::new();
    for r in rows.iter().filter(|r| r.approach == approach) {
        let key = (fraction_key(r.fraction), r.run_id);
        let Some(b) = base.get(&key) else { continue };
        if b.subset_fingerprint != r.subset_fingerprint {
            return Err(StiltError::Contract(format!(
                "{approach} run {} at fraction {} trained on a different subset than baseline",
                r.run_id, r.fraction
            )));
        }
        out.insert(
            key,
            PairedSample {
                run_id: format!("f{:04}/r{:02}", key.0, key.1),
                score_a: b.weighted_f1,
                score_b: r.weighted_f1,
            },
        );
    }
    Ok(out)
}

fn compare(approach: ProtocolKind, scope: &str, pairs: &[PairedSample]) -> Result<Comparison> {
    let (result, note) = match wilcoxon_signed_rank(pairs) {
        Ok(t) if t.n_used < 6 => (
            Some(t),
            format!("warning: only {} non-zero pairs; two-sided p cannot reach 0.05", t.n_used),
        ),
        Ok(t) => (Some(t), String::new()),
        Err(StiltError::Degenerate(m)) => (None, format!("warning: {m}")),
        Err(e) => return Err(e),
    };
    Ok(Comparison {
        approach,
        scope: scope.into(),
        n_pairs: pairs.len(),
        result,
        note,
    })
}

fn approaches_in(rows: &[MetricsRow]) -> Vec<ProtocolKind> {
    let mut a: Vec<ProtocolKind> = rows.iter().map(|r| r.approach).collect();
    a.sort();
    a.dedup();
    a
}

/// Paired tests of every STILT approach against baseline.
pub fn comparisons(rows: &[MetricsRow]) -> Result<Vec<Comparison>> {
    let mut keys: Vec<u32> = rows.iter().map(|r| fraction_key(r.fraction)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut out = Vec::new();
    for approach in approaches_in(rows) {
        if approach == ProtocolKind::Baseline {
            continue;
        }
        let pairs = pairs_for(rows, approach)?;
        if pairs.is_empty() {
            continue;
        }
        let all: Vec<PairedSample> = pairs.values().cloned().collect();
        out.push(compare(approach, "all", &all)?);
        if keys.len() > 1 {
            let band: Vec<PairedSample> = pairs
                .iter()
                .filter(|((k, _), _)| (500..=800).contains(k))
                .map(|(_, p)| p.clone())
                .collect();
            if !band.is_empty() {
                out.push(compare(approach, "band_50_80", &band)?);
            }
        }
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn stats_csv(comps: &[Comparison]) -> String {
    let mut s = String::from("comparison,scope,n_pairs,n_used,n_zero,w_plus,p_two_sided,method,note\n");
    for c in comps {
        let r = c.result.as_ref();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            c.name(),
            c.scope,
            c.n_pairs,
            r.map(|t| t.n_used.to_string()).unwrap_or_else(|| "0".into()),
            r.map(|t| t.n_zero).unwrap_or(c.n_pairs),
            opt(r.map(|t| t.statistic)),
            opt(r.map(|t| t.p_two_sided)),
            r.map(|t| t.method.as_str()).unwrap_or(""),
            c.note
        )
        .unwrap();
    }
    s
}

/// Rows grouped by `(fraction, approach)` in canonical order.
fn grouped(rows: &[MetricsRow]) -> BTreeMap<(u32, ProtocolKind), Vec<&MetricsRow>> {
    let mut g: BTreeMap<_, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        g.entry((fraction_key(r.fraction), r.approach)).or_default().push(r);
    }
    g
}

fn table4_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut s = String::from(
        "fraction,approach,n,f1_mean,f1_std,precision_mean,precision_std,recall_mean,recall_std,p_vs_baseline\n",
    );
    for ((key, approach), group) in grouped(rows) {
        let col = |f: fn(&MetricsRow) -> f64| summarize(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
        let f1 = col(|r| r.weighted_f1)?;
        let p = col(|r| r.weighted_precision)?;
        let rc = col(|r| r.weighted_recall)?;
        let pval = if approach == ProtocolKind::Baseline {
            None
        } else {
            let pairs: Vec<PairedSample> = pairs_for(rows, approach)?
                .into_iter()
                .filter(|((k, _), _)| *k == key)
                .map(|(_, p)| p)
                .collect();
            match wilcoxon_signed_rank(&pairs) {
                Ok(t) => Some(t.p_two_sided),
                Err(StiltError::Degenerate(_)) => None,
                Err(e) => return Err(e),
            }
        };
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            group[0].fraction,
            approach,
            f1.n,
            f1.mean,
            f1.std,
            p.mean,
            p.std,
            rc.mean,
            rc.std,
            opt(pval)
        )
        .unwrap();
    }
    Ok(s)
}

fn fig4_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut s = String::from("fraction,approach,n,mean,std\n");
    for ((_, approach), group) in grouped(rows) {
        let f1 = summarize(&group.iter().map(|r| r.weighted_f1).collect::<Vec<_>>())?;
        writeln!(s, "{},{},{},{},{}", group[0].fraction, approach, f1.n, f1.mean, f1.std).unwrap();
    }
    Ok(s)
}

fn contingency_csv(dir: &Path, rows: &[MetricsRow]) -> Result<String> {
    let mut s = String::from(
        "comparison,fraction,approach_run_id,approach_f1,baseline_run_id,baseline_f1,both_correct,only_baseline_correct,only_approach_correct,both_wrong,total\n",
    );
    for approach in approaches_in(rows) {
        if approach == ProtocolKind::Baseline {
            continue;
        }
        // Best run; ties go to the lowest (fraction, run_id).
        let Some(best) = rows.iter().filter(|r| r.approach == approach).reduce(|a, b| {
            if b.weighted_f1 > a.weighted_f1 {
                b
            } else {
                a
            }
        }) else {
            continue;
        };
        let key = fraction_key(best.fraction);
        let Some(partner) = rows
            .iter()
            .filter(|r| r.approach == ProtocolKind::Baseline && fraction_key(r.fraction) == key)
            .reduce(|a, b| {
                let da = (a.weighted_f1 - best.weighted_f1).abs();
                let db = (b.weighted_f1 - best.weighted_f1).abs();
                if db < da {
                    b
                } else {
                    a
                }
            })
        else {
            continue;
        };
        let load = |r: &MetricsRow| {
            read_predictions(&dir.join(run_dir(r.approach, r.fraction, r.run_id)).join("predictions_test.csv"))
        };
        let (a, b) = (load(partner)?, load(best)?);
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.id != y.id || x.label != y.label) {
            return Err(StiltError::Contract(format!(
                "baseline and {approach} predictions cover different test records"
            )));
        }
        let labels: Vec<usize> = a.iter().map(|p| p.label).collect();
        let pa: Vec<usize> = a.iter().map(|p| p.predicted).collect();
        let pb: Vec<usize> = b.iter().map(|p| p.predicted).collect();
        let t = contingency(&labels, &pa, &pb)?;
        writeln!(
            s,
            "baseline_vs_{approach},{},{},{},{},{},{},{},{},{},{}",
            best.fraction,
            best.run_id,
            best.weighted_f1,
            partner.run_id,
            partner.weighted_f1,
            t.both_correct,
            t.only_a_correct,
            t.only_b_correct,
            t.both_wrong,
            t.total()
        )
        .unwrap();
    }
    Ok(s)
}

/// Validates a run directory and (re)writes `stats.csv`, `table4.csv`,
/// `fig4.csv` and `contingency.csv` from `metrics.csv` and the per-run files.
pub fn report(dir: &Path) -> Result<ReportSummary> {
    if !dir.is_dir() {
        return Err(StiltError::NoRuns(dir.to_path_buf()));
    }
    let rows = read_metrics(dir)?;
    let mut missing = Vec::new();
    for r in &rows {
        let rd = run_dir(r.approach, r.fraction, r.run_id);
        for f in RUN_FILES {
            if !dir.join(&rd).join(f).is_file() {
                missing.push(rd.join(f).display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(StiltError::Incomplete {
            dir: dir.to_path_buf(),
            missing,
        });
    }

    let comps = comparisons(&rows)?;
    let outputs = [
        ("stats.csv", stats_csv(&comps)),
        ("table4.csv", table4_csv(&rows)?),
        ("fig4.csv", fig4_csv(&rows)?),
        ("contingency.csv", contingency_csv(dir, &rows)?),
    ];
    let mut files = Vec::new();
    for (name, body) in outputs {
        let p = dir.join(name);
        write_file(&p, &body)?;
        files.push(p);
    }
    Ok(ReportSummary {
        rows,
        comparisons: comps,
        files,
    })
}
