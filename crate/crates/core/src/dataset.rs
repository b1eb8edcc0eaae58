//! In-memory datasets and their on-disk layout.
//!
//! A dataset directory holds `manifest.json` plus two headerless
//! little-endian `f32` files per sample: the `T x dim` raw video features and
//! the `N` query token ids (stored as floats, one per word).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diff::Matrix;
use crate::encoders::FeatureSequence;
use crate::error::{Error, Result};
use crate::inference::MomentBoundary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub video: FeatureSequence,
    pub query: Vec<usize>,
    pub boundary: Option<MomentBoundary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: Domain,
    pub dim: usize,
    pub vocab_size: usize,
    pub seed: Option<u64>,
    pub samples: Vec<Sample>,
}

/// A video-query pair with no access to its moment boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub id: String,
    pub video: FeatureSequence,
    pub query: Vec<usize>,
}

/// Target-domain training view: boundaries are dropped on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledDataset {
    pub dim: usize,
    pub vocab_size: usize,
    pub samples: Vec<UnlabeledSample>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_annotated(&self) -> bool {
        self.samples.iter().all(|s| s.boundary.is_some())
    }

    pub fn unlabeled(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            dim: self.dim,
            vocab_size: self.vocab_size,
            samples: self
                .samples
                .iter()
                .map(|s| UnlabeledSample {
                    id: s.id.clone(),
                    video: s.video.clone(),
                    query: s.query.clone(),
                })
                .collect(),
        }
    }

    /// Checks dims, token ranges and boundary ranges of every sample.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if s.video.dim() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    actual: s.video.dim(),
                });
            }
            if s.query.is_empty() {
                return Err(Error::Empty("query tokens"));
            }
            if let Some(&id) = s.query.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::OutOfVocabulary {
                    id,
                    vocab: self.vocab_size,
                });
            }
            if let Some(b) = s.boundary {
                MomentBoundary::new(b.start, b.end, s.video.len())?;
            }
        }
        Ok(())
    }
}

impl UnlabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    domain: Domain,
    dim: usize,
    vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    samples: Vec<ManifestSample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    id: String,
    video_file: String,
    query_file: String,
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "N")]
    words: usize,
    boundary: Option<[usize; 2]>,
}

pub const MANIFEST: &str = "manifest.json";

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, sample: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::FileShape {
            sample: sample.to_string(),
            file: path.to_path_buf(),
            expected_bytes: expected * 4,
            actual_bytes: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn save_dataset(dataset: &DomainDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let video_file = format!("{}.video.f32", s.id);
        let query_file = format!("{}.query.f32", s.id);
        write_f32(&dir.join(&video_file), s.video.values().data().iter().copied())?;
        write_f32(&dir.join(&query_file), s.query.iter().map(|&t| t as f64))?;
        samples.push(ManifestSample {
            id: s.id.clone(),
            video_file,
            query_file,
            frames: s.video.len(),
            words: s.query.len(),
            boundary: s.boundary.map(|b| [b.start, b.end]),
        });
    }
    let manifest = Manifest {
        domain: dataset.domain,
        dim: dataset.dim,
        vocab_size: dataset.vocab_size,
        seed: dataset.seed,
        samples,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DomainDataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if manifest.dim == 0 {
        return Err(Error::Manifest {
            path,
            detail: "dim must be positive".into(),
        });
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for m in manifest.samples {
        let video_path: PathBuf = dir.join(&m.video_file);
        let values = read_f32(&video_path, &m.id, m.frames * manifest.dim)?;
        let video =
            FeatureSequence::new(Matrix::from_vec(m.frames, manifest.dim, values)?).map_err(|e| Error::Manifest {
                path: path.clone(),
                detail: format!("sample {}: {e}", m.id),
            })?;
        let query_path = dir.join(&m.query_file);
        let query = read_f32(&query_path, &m.id, m.words)?
            .into_iter()
            .map(|v| {
                if v < 0.0 || v.fract() != 0.0 {
                    Err(Error::Manifest {
                        path: query_path.clone(),
                        detail: format!("sample {}: token {v} is not a non-negative integer", m.id),
                    })
                } else {
                    Ok(v as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let boundary = match m.boundary {
            Some([s, e]) => Some(MomentBoundary::new(s, e, m.frames).map_err(|e| Error::Manifest {
                path: path.clone(),
                detail: format!("sample {}: {e}", m.id),
            })?),
            None => None,
        };
        samples.push(Sample {
            id: m.id,
            video,
            query,
            boundary,
        });
    }
    let dataset = DomainDataset {
        domain: manifest.domain,
        dim: manifest.dim,
        vocab_size: manifest.vocab_size,
        seed: manifest.seed,
        samples,
    };
    dataset.validate().map_err(|e| Error::Manifest {
        path,
        detail: e.to_string(),
    })?;
    Ok(dataset)
}
