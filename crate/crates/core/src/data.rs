//! Embedding datasets: records, manifests, JSON-lines I/O, blank-modality
//! resolution and class-balanced fractional sampling.
//!
//! A dataset is a manifest (`*.manifest.json`) plus a JSON-lines record
//! file named by the manifest's `data_file`, resolved relative to the
//! manifest. Each record line looks like
//!
//! ```json
//! {"id":"m-1","split":"train","label":2,"image_embedding":[0.1,-0.2],"text_embedding":null}
//! ```
//!
//! Floats are written in shortest round-trip form, so load → save → load
//! is bit-exact.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, StiltError};
use crate::model::Batch;
use crate::rng::DeterministicRng;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Three-way sentiment label; the discriminant is the class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Negative, Label::Neutral, Label::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: i64) -> Option<Label> {
        match i {
            0 => Some(Label::Negative),
            1 => Some(Label::Neutral),
            2 => Some(Label::Positive),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// One sample. Memes carry both embeddings, unimodal samples one.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub split: Split,
    pub label: Label,
    pub image_embedding: Option<Vec<f64>>,
    pub text_embedding: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    split: Split,
    label: i64,
    image_embedding: Option<Vec<f64>>,
    text_embedding: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub dimension: usize,
    /// Record file, relative to the manifest's directory.
    pub data_file: String,
    pub blank_image_embedding: Vec<f64>,
    pub blank_text_embedding: Vec<f64>,
    pub class_names: [String; 3],
    pub record_count: SplitCounts,
}

impl DatasetManifest {
    pub fn with_zero_blanks(name: &str, dimension: usize, data_file: &str) -> Self {
        DatasetManifest {
            name: name.to_string(),
            dimension,
            data_file: data_file.to_string(),
            blank_image_embedding: vec![0.0; dimension],
            blank_text_embedding: vec![0.0; dimension],
            class_names: ["negative".into(), "neutral".into(), "positive".into()],
            record_count: SplitCounts::default(),
        }
    }
}

/// A loaded dataset with records grouped by split, each in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<EmbeddingRecord>,
    pub val: Vec<EmbeddingRecord>,
    pub test: Vec<EmbeddingRecord>,
}

impl Dataset {
    /// Builds a dataset from records, filling in the manifest counts.
    pub fn from_records(mut manifest: DatasetManifest, records: Vec<EmbeddingRecord>) -> Self {
        let mut ds = Dataset {
            manifest: manifest.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for r in records {
            ds.split_mut(r.split).push(r);
        }
        manifest.record_count = SplitCounts {
            train: ds.train.len(),
            val: ds.val.len(),
            test: ds.test.len(),
        };
        ds.manifest = manifest;
        ds
    }

    pub fn split(&self, split: Split) -> &[EmbeddingRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<EmbeddingRecord> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn records(&self) -> impl Iterator<Item = &EmbeddingRecord> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

fn validate_record(rec: &RecordLine, dim: usize) -> std::result::Result<Label, String> {
    let label = Label::from_index(rec.label).ok_or_else(|| format!("unknown label {}", rec.label))?;
    if rec.image_embedding.is_none() && rec.text_embedding.is_none() {
        return Err("both modalities missing".into());
    }
    for (what, emb) in [("image", &rec.image_embedding), ("text", &rec.text_embedding)] {
        if let Some(v) = emb {
            if v.len() != dim {
                return Err(format!(
                    "{what} embedding has dimension {}, manifest says {dim}",
                    v.len()
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(format!("{what} embedding has a non-finite entry"));
            }
        }
    }
    Ok(label)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text =
        fs::read_to_string(manifest_path).map_err(|e| StiltError::io(manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| StiltError::Parse {
            path: manifest_path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let bad_manifest = |reason: String| StiltError::Parse {
        path: manifest_path.to_path_buf(),
        reason,
    };
    if manifest.dimension == 0 {
        return Err(bad_manifest("dimension must be >= 1".into()));
    }
    for (what, v) in [
        ("blank_image_embedding", &manifest.blank_image_embedding),
        ("blank_text_embedding", &manifest.blank_text_embedding),
    ] {
        if v.len() != manifest.dimension {
            return Err(bad_manifest(format!(
                "{what} has dimension {}, manifest says {}",
                v.len(),
                manifest.dimension
            )));
        }
    }

    let data_path = data_path(manifest_path, &manifest);
    let file = fs::File::open(&data_path).map_err(|e| StiltError::io(&data_path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| StiltError::io(&data_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordLine = serde_json::from_str(&line).map_err(|e| StiltError::Record {
            path: data_path.clone(),
            line: line_no,
            id: extract_id(&line),
            reason: e.to_string(),
        })?;
        let label = validate_record(&raw, manifest.dimension).map_err(|reason| {
            StiltError::Record {
                path: data_path.clone(),
                line: line_no,
                id: raw.id.clone(),
                reason,
            }
        })?;
        records.push(EmbeddingRecord {
            id: raw.id,
            split: raw.split,
            label,
            image_embedding: raw.image_embedding,
            text_embedding: raw.text_embedding,
        });
    }
    let declared = manifest.record_count;
    let ds = Dataset::from_records(manifest, records);
    if ds.manifest.record_count != declared {
        return Err(bad_manifest(format!(
            "record_count {:?} does not match file contents {:?}",
            declared, ds.manifest.record_count
        )));
    }
    Ok(ds)
}

fn extract_id(line: &str) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(str::to_string))
        .unwrap_or_default()
}

fn data_path(manifest_path: &Path, manifest: &DatasetManifest) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.data_file)
}

/// Serialised record file contents: train, then val, then test records.
pub fn encode_records(ds: &Dataset) -> String {
    let mut out = String::new();
    for r in ds.records() {
        let line = RecordLine {
            id: r.id.clone(),
            split: r.split,
            label: r.label.index() as i64,
            image_embedding: r.image_embedding.clone(),
            text_embedding: r.text_embedding.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("record serialises"));
        out.push('\n');
    }
    out
}

/// Writes the manifest to `manifest_path` and the records next to it.
pub fn save_dataset(ds: &Dataset, manifest_path: &Path) -> Result<()> {
    let data_path = data_path(manifest_path, &ds.manifest);
    if let Some(dir) = manifest_path.parent() {
        fs::create_dir_all(dir).map_err(|e| StiltError::io(dir, e))?;
    }
    let mut manifest = serde_json::to_string_pretty(&ds.manifest).expect("manifest serialises");
    manifest.push('\n');
    fs::write(manifest_path, manifest).map_err(|e| StiltError::io(manifest_path, e))?;
    let mut f = fs::File::create(&data_path).map_err(|e| StiltError::io(&data_path, e))?;
    f.write_all(encode_records(ds).as_bytes())
        .map_err(|e| StiltError::io(&data_path, e))
}

/// Both embeddings of a sample after blank substitution.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityInput {
    pub image_embedding: Vec<f64>,
    pub text_embedding: Vec<f64>,
}

/// Substitutes the manifest's blank embedding for a missing modality.
pub fn resolve_blank(record: &EmbeddingRecord, manifest: &DatasetManifest) -> ModalityInput {
    ModalityInput {
        image_embedding: record
            .image_embedding
            .clone()
            .unwrap_or_else(|| manifest.blank_image_embedding.clone()),
        text_embedding: record
            .text_embedding
            .clone()
            .unwrap_or_else(|| manifest.blank_text_embedding.clone()),
    }
}

/// Stacks the resolved inputs of `records` into a model batch.
pub fn to_batch<T: Scalar>(
    records: &[&EmbeddingRecord],
    manifest: &DatasetManifest,
) -> Result<Batch<T>> {
    let d = manifest.dimension;
    let mut image = Vec::with_capacity(records.len() * d);
    let mut text = Vec::with_capacity(records.len() * d);
    for r in records {
        let input = resolve_blank(r, manifest);
        if input.image_embedding.len() != d || input.text_embedding.len() != d {
            return Err(StiltError::dim("to_batch", r.id.clone(), d));
        }
        image.extend(input.image_embedding.iter().map(|&v| T::cst(v)));
        text.extend(input.text_embedding.iter().map(|&v| T::cst(v)));
    }
    Batch::new(
        Matrix::from_vec(records.len(), d, image)?,
        Matrix::from_vec(records.len(), d, text)?,
    )
}

/// Per-class tallies `(N_0, N_1, N_2)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts(pub [usize; 3]);

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn get(&self, label: Label) -> usize {
        self.0[label.index()]
    }
}

pub fn class_counts<'a>(records: impl IntoIterator<Item = &'a EmbeddingRecord>) -> ClassCounts {
    let mut c = [0usize; 3];
    for r in records {
        c[r.label.index()] += 1;
    }
    ClassCounts(c)
}

/// Fractions swept when studying limited labelled data.
pub const SWEEP_FRACTIONS: [f64; 9] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];

/// `round(fraction · n)`, halves rounded up.
pub fn subset_size(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// Indices of a class-balanced sample without replacement, in descending
/// key order (the order a sequential weighted draw would pick them).
///
/// Each record gets weight `1/N_label` and key `ln(u)/w` (order-equivalent
/// to `u^(1/w)`); the `k` largest keys win.
pub(crate) fn ranked_sample(
    records: &[EmbeddingRecord],
    k: usize,
    rng: &mut DeterministicRng,
) -> Vec<usize> {
    let counts = class_counts(records);
    let mut keyed: Vec<(f64, usize)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            // The record's own class is present, so its count is >= 1.
            let weight = 1.0 / counts.get(r.label) as f64;
            (rng.uniform_open().ln() / weight, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.truncate(k);
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Sorted indices of the records picked by [`fractional_sample`].
pub fn fractional_sample_indices(
    records: &[EmbeddingRecord],
    fraction: f64,
    rng: &mut DeterministicRng,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(StiltError::Config(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let k = subset_size(fraction, records.len());
    let mut idx = ranked_sample(records, k, rng);
    idx.sort_unstable();
    Ok(idx)
}

/// Class-balanced random subset of `round(fraction·N)` distinct records,
/// returned in source order.
pub fn fractional_sample(
    records: &[EmbeddingRecord],
    fraction: f64,
    rng: &mut DeterministicRng,
) -> Result<Vec<EmbeddingRecord>> {
    Ok(fractional_sample_indices(records, fraction, rng)?
        .into_iter()
        .map(|i| records[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: Label) -> EmbeddingRecord {
        EmbeddingRecord {
            id: id.into(),
            split: Split::Train,
            label,
            image_embedding: Some(vec![1.0, 2.0]),
            text_embedding: None,
        }
    }

    fn manifest() -> DatasetManifest {
        let mut m = DatasetManifest::with_zero_blanks("t", 2, "t.jsonl");
        m.blank_text_embedding = vec![-1.0, -1.0];
        m.blank_image_embedding = vec![9.0, 9.0];
        m
    }

    #[test]
    fn resolve_blank_cases() {
        let m = manifest();
        let image_only = rec("a", Label::Neutral);
        let r = resolve_blank(&image_only, &m);
        assert_eq!(r.text_embedding, vec![-1.0, -1.0]);
        assert_eq!(r.image_embedding, vec![1.0, 2.0]);

        let text_only = EmbeddingRecord {
            image_embedding: None,
            text_embedding: Some(vec![3.0, 4.0]),
            ..image_only.clone()
        };
        let r = resolve_blank(&text_only, &m);
        assert_eq!(r.image_embedding, vec![9.0, 9.0]);
        assert_eq!(r.text_embedding, vec![3.0, 4.0]);

        let meme = EmbeddingRecord {
            text_embedding: Some(vec![5.0, 6.0]),
            ..image_only
        };
        let r = resolve_blank(&meme, &m);
        assert_eq!((r.image_embedding, r.text_embedding), (vec![1.0, 2.0], vec![5.0, 6.0]));
    }

    #[test]
    fn resolve_blank_is_idempotent() {
        let m = manifest();
        let once = resolve_blank(&rec("a", Label::Positive), &m);
        let again = resolve_blank(
            &EmbeddingRecord {
                image_embedding: Some(once.image_embedding.clone()),
                text_embedding: Some(once.text_embedding.clone()),
                ..rec("a", Label::Positive)
            },
            &m,
        );
        assert_eq!(once, again);
    }

    #[test]
    fn class_counts_memotion_splits() {
        // Validation and test splits of the meme benchmark (Neg, Neu, Pos).
        for (counts, total) in [([200, 975, 325], 1500), ([451, 971, 78], 1500)] {
            let mut records = Vec::new();
            for (c, &n) in counts.iter().enumerate() {
                for i in 0..n {
                    records.push(rec(&format!("{c}-{i}"), Label::ALL[c]));
                }
            }
            let cc = class_counts(&records);
            assert_eq!(cc, ClassCounts(counts));
            assert_eq!(cc.total(), total);
        }
        assert_eq!(class_counts(&[]), ClassCounts([0, 0, 0]));
    }

    #[test]
    fn fractional_sample_sizes() {
        let records: Vec<_> = (0..10).map(|i| rec(&i.to_string(), Label::ALL[i % 3])).collect();
        let mut rng = DeterministicRng::new(1);
        let all = fractional_sample_indices(&records, 1.0, &mut rng).unwrap();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let half = fractional_sample_indices(&records, 0.5, &mut rng).unwrap();
        assert_eq!(half.len(), 5);
        assert!(half.windows(2).all(|w| w[0] < w[1]));
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(fractional_sample(&records, bad, &mut rng).is_err());
        }
    }

    #[test]
    fn round_half_up() {
        assert_eq!(subset_size(0.5, 5), 3);
        assert_eq!(subset_size(0.3, 10), 3);
        assert_eq!(subset_size(0.05, 10), 1);
    }

    #[test]
    fn first_draw_probability_matches_normalised_inverse_weights() {
        // 8 Pos, 1 Neu, 1 Neg: P(first pick is Pos) = (8·1/8)/(8·1/8 + 1 + 1) = 1/3.
        let mut records: Vec<_> = (0..8).map(|i| rec(&format!("p{i}"), Label::Positive)).collect();
        records.push(rec("u", Label::Neutral));
        records.push(rec("n", Label::Negative));
        let trials = 30_000;
        let mut rng = DeterministicRng::new(99);
        let hits = (0..trials)
            .filter(|_| records[ranked_sample(&records, 3, &mut rng)[0]].label == Label::Positive)
            .count();
        let p = hits as f64 / trials as f64;
        let sigma = ((1.0 / 3.0) * (2.0 / 3.0) / trials as f64).sqrt();
        assert!((p - 1.0 / 3.0).abs() < 4.0 * sigma, "{p}");
    }

    #[test]
    fn sampling_is_a_pure_function_of_seed() {
        let records: Vec<_> = (0..50).map(|i| rec(&i.to_string(), Label::ALL[i % 3])).collect();
        let a = fractional_sample_indices(&records, 0.3, &mut DeterministicRng::new(5)).unwrap();
        let b = fractional_sample_indices(&records, 0.3, &mut DeterministicRng::new(5)).unwrap();
        assert_eq!(a, b);
    }
}
