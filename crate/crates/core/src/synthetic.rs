//! Seeded synthetic stand-ins for the meme, image-only and text-only corpora.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{save_dataset, Dataset, DatasetManifest, EmbeddingRecord, Label, Split};
use crate::error::{Result, StiltError};
use crate::rng::DeterministicRng;

/// Per-class counts `[negative, neutral, positive]` for each meme split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemeCounts {
    pub train: [usize; 3],
    pub val: [usize; 3],
    pub test: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub dimension: usize,
    pub memes: MemeCounts,
    /// Per-class counts of the image-only intermediate corpus.
    pub images: [usize; 3],
    /// Per-class counts of the text-only intermediate corpus.
    pub texts: [usize; 3],
    pub image_signal: f64,
    pub text_signal: f64,
    pub noise_scale: f64,
    pub domain_shift: f64,
}

impl SyntheticSpec {
    /// Reads a TOML spec file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StiltError::io(path, e))?;
        let spec: SyntheticSpec = toml::from_str(&text).map_err(|e| StiltError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(StiltError::Config("synthetic dimension must be >= 1".into()));
        }
        for (name, v) in [
            ("image_signal", self.image_signal),
            ("text_signal", self.text_signal),
            ("noise_scale", self.noise_scale),
            ("domain_shift", self.domain_shift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(StiltError::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The three generated corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSuite {
    pub memes: Dataset,
    pub images: Dataset,
    pub texts: Dataset,
}

fn unit_vector(dim: usize, rng: &mut DeterministicRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn embed(center: &[f64], scale: f64, noise: f64, rng: &mut DeterministicRng) -> Vec<f64> {
    center
        .iter()
        .map(|&c| scale * c + noise * rng.standard_normal())
        .collect()
}

/// Draws class directions `μ_c` and a shift direction `δ` once, then:
/// memes get `image_signal·μ_c + noise` and `text_signal·μ_c + noise`;
/// unimodal records get `signal·(μ_c + domain_shift·δ) + noise` in their
/// single modality.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSuite> {
    spec.validate()?;
    let d = spec.dimension;
    let mut dir_rng = DeterministicRng::with_stream(spec.seed, 0);
    let centers: Vec<Vec<f64>> = (0..3).map(|_| unit_vector(d, &mut dir_rng)).collect();
    let shift = unit_vector(d, &mut dir_rng);
    let shifted: Vec<Vec<f64>> = centers
        .iter()
        .map(|c| c.iter().zip(&shift).map(|(a, s)| a + spec.domain_shift * s).collect())
        .collect();

    let mut meme_rng = DeterministicRng::with_stream(spec.seed, 1);
    let mut memes = Vec::new();
    for (split, counts) in [
        (Split::Train, spec.memes.train),
        (Split::Val, spec.memes.val),
        (Split::Test, spec.memes.test),
    ] {
        let mut part = Vec::new();
        for label in Label::ALL {
            for _ in 0..counts[label.index()] {
                let mu = &centers[label.index()];
                part.push(EmbeddingRecord {
                    id: String::new(),
                    split,
                    label,
                    image_embedding: Some(embed(mu, spec.image_signal, spec.noise_scale, &mut meme_rng)),
                    text_embedding: Some(embed(mu, spec.text_signal, spec.noise_scale, &mut meme_rng)),
                });
            }
        }
        meme_rng.shuffle(&mut part);
        for (i, r) in part.iter_mut().enumerate() {
            r.id = format!("meme-{}-{i:05}", split.as_str());
        }
        memes.extend(part);
    }

    let unimodal = |stream: u64, counts: [usize; 3], image: bool| {
        let mut rng = DeterministicRng::with_stream(spec.seed, stream);
        let signal = if image { spec.image_signal } else { spec.text_signal };
        let mut part = Vec::new();
        for label in Label::ALL {
            for _ in 0..counts[label.index()] {
                let v = embed(&shifted[label.index()], signal, spec.noise_scale, &mut rng);
                part.push(EmbeddingRecord {
                    id: String::new(),
                    split: Split::Train,
                    label,
                    image_embedding: image.then(|| v.clone()),
                    text_embedding: (!image).then_some(v),
                });
            }
        }
        rng.shuffle(&mut part);
        let prefix = if image { "image" } else { "text" };
        for (i, r) in part.iter_mut().enumerate() {
            r.id = format!("{prefix}-{i:05}");
        }
        part
    };

    Ok(SyntheticSuite {
        memes: Dataset::from_records(
            DatasetManifest::with_zero_blanks("synthetic-memes", d, "memes.jsonl"),
            memes,
        ),
        images: Dataset::from_records(
            DatasetManifest::with_zero_blanks("synthetic-images", d, "images.jsonl"),
            unimodal(2, spec.images, true),
        ),
        texts: Dataset::from_records(
            DatasetManifest::with_zero_blanks("synthetic-texts", d, "texts.jsonl"),
            unimodal(3, spec.texts, false),
        ),
    })
}

/// Manifest paths written by [`write_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuitePaths {
    pub memes: PathBuf,
    pub images: PathBuf,
    pub texts: PathBuf,
}

impl SuitePaths {
    pub fn in_dir(dir: &Path) -> Self {
        SuitePaths {
            memes: dir.join("memes.manifest.json"),
            images: dir.join("images.manifest.json"),
            texts: dir.join("texts.manifest.json"),
        }
    }
}

pub fn write_suite(suite: &SyntheticSuite, dir: &Path) -> Result<SuitePaths> {
    let paths = SuitePaths::in_dir(dir);
    save_dataset(&suite.memes, &paths.memes)?;
    save_dataset(&suite.images, &paths.images)?;
    save_dataset(&suite.texts, &paths.texts)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec() -> SyntheticSpec {
        SyntheticSpec {
            seed: 3,
            dimension: 6,
            memes: MemeCounts {
                train: [4, 5, 6],
                val: [2, 2, 2],
                test: [1, 2, 3],
            },
            images: [3, 3, 3],
            texts: [2, 2, 2],
            image_signal: 1.0,
            text_signal: 2.0,
            noise_scale: 0.5,
            domain_shift: 0.3,
        }
    }

    #[test]
    fn shapes_and_modalities() {
        let s = generate_synthetic(&spec()).unwrap();
        assert_eq!(s.memes.manifest.record_count.train, 15);
        assert_eq!(s.memes.test.len(), 6);
        assert!(s.memes.records().all(|r| r.image_embedding.is_some() && r.text_embedding.is_some()));
        assert!(s.images.records().all(|r| r.image_embedding.is_some() && r.text_embedding.is_none()));
        assert!(s.texts.records().all(|r| r.image_embedding.is_none() && r.text_embedding.is_some()));
        assert_eq!(s.texts.train.len(), 6);
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_synthetic(&spec()).unwrap(), generate_synthetic(&spec()).unwrap());
    }

    #[test]
    fn zero_text_signal_removes_class_information() {
        let s = generate_synthetic(&SyntheticSpec {
            text_signal: 0.0,
            noise_scale: 0.0,
            ..spec()
        })
        .unwrap();
        assert!(s
            .memes
            .records()
            .all(|r| r.text_embedding.as_ref().unwrap().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn invalid_scales_rejected() {
        for bad in [-1.0, f64::NAN, f64::INFINITY] {
            assert!(generate_synthetic(&SyntheticSpec { noise_scale: bad, ..spec() }).is_err());
        }
    }
}
