//! The full retrieval model: shared encoders, cross-modal fusion and the four
//! sequence-level projections, plus its checkpoint format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Var};
use crate::encoders::{EncoderOrder, FeatureSequence, QueryEncoder, SequenceEncoder};
use crate::error::{Error, Result};
use crate::inference::{cosine_scores, MomentBoundary, ScoreSequence};
use crate::params::{Bound, ParamId, ParamStore};
use crate::xmodal::{CosineMode, Fusion};

/// Which frames of an annotated source video feed its sequence-level
/// representation in the supervised ranking loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourcePooling {
    /// Only the annotated moment.
    #[default]
    Moment,
    /// Every frame.
    Full,
}

/// Embedding space in which frames are scored against the query at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringSpace {
    /// The space trained by the supervised source loss.
    #[default]
    Source,
    /// The space trained by the target cross-modal loss.
    Target,
    /// Fused frames against the raw pooled query, no projection.
    Encoded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub video_input_dim: usize,
    pub vocab_size: usize,
    pub dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub video_order: EncoderOrder,
    pub query_order: EncoderOrder,
    pub cosine: CosineMode,
    pub source_pooling: SourcePooling,
    pub scoring: ScoringSpace,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            video_input_dim: 16,
            vocab_size: 64,
            dim: 16,
            hidden: 8,
            heads: 2,
            video_order: EncoderOrder::AttentionFirst,
            query_order: EncoderOrder::RecurrentFirst,
            cosine: CosineMode::Signed,
            source_pooling: SourcePooling::Moment,
            scoring: ScoringSpace::Source,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("video_input_dim", self.video_input_dim),
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let attention_dim = match self.video_order {
            EncoderOrder::AttentionFirst => self.video_input_dim,
            EncoderOrder::RecurrentFirst => self.dim,
        };
        if attention_dim % self.heads != 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads must divide the attention widths ({attention_dim} and {})",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

/// All learnable weights. Encoders are shared by both domains.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub video: SequenceEncoder,
    pub query: QueryEncoder,
    pub fusion: Fusion,
    /// Target-side video projection (`P_V`).
    pub target_video_proj: ParamId,
    /// Target-side query projection (`P_Q`).
    pub target_query_proj: ParamId,
    /// Source-side video projection (`P_v`).
    pub source_video_proj: ParamId,
    /// Source-side query projection (`P_q`).
    pub source_query_proj: ParamId,
}

/// Graph handles for one encoded video-query pair.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `T x d` encoded frames.
    pub video: Var,
    /// `N x d` encoded words.
    pub query: Var,
    /// `T x d` frames after cross-modal fusion with this query.
    pub fused: Var,
}

impl ModelParams {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let video = SequenceEncoder::new(
            &mut store,
            &mut rng,
            "video",
            config.video_order,
            config.video_input_dim,
            d,
            config.hidden,
            config.heads,
        )?;
        let embedding = store.add_uniform("query.embedding", config.vocab_size, d, d, &mut rng);
        let encoder = SequenceEncoder::new(
            &mut store,
            &mut rng,
            "query",
            config.query_order,
            d,
            d,
            config.hidden,
            config.heads,
        )?;
        let query = QueryEncoder {
            vocab: config.vocab_size,
            embedding,
            encoder,
        };
        let fusion = Fusion::new(&mut store, &mut rng, d, config.hidden);
        let target_video_proj = store.add_uniform("proj.target_video", d, d, d, &mut rng);
        let target_query_proj = store.add_uniform("proj.target_query", d, d, d, &mut rng);
        let source_video_proj = store.add_uniform("proj.source_video", d, d, d, &mut rng);
        let source_query_proj = store.add_uniform("proj.source_query", d, d, d, &mut rng);
        Ok(ModelParams {
            config,
            store,
            video,
            query,
            fusion,
            target_video_proj,
            target_query_proj,
            source_video_proj,
            source_query_proj,
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.store.to_flat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.store.set_flat(flat)
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.store.bind(g)
    }

    pub fn encode_video_graph(&self, g: &mut Graph, b: &Bound, raw: &FeatureSequence) -> Result<Var> {
        let x = g.leaf(raw.values().clone());
        self.video.forward(g, b, x)
    }

    pub fn encode_query_graph(&self, g: &mut Graph, b: &Bound, tokens: &[usize]) -> Result<Var> {
        self.query.forward(g, b, tokens)
    }

    /// Encodes both modalities and fuses the video with its query.
    pub fn encode_pair(&self, g: &mut Graph, b: &Bound, video: &FeatureSequence, query: &[usize]) -> Result<Encoded> {
        let v = self.encode_video_graph(g, b, video)?;
        let q = self.encode_query_graph(g, b, query)?;
        let fused = self.fusion.fuse_encoded(g, b, v, q, self.config.cosine)?;
        Ok(Encoded {
            video: v,
            query: q,
            fused,
        })
    }

    /// Sequence-level source video representation, `1 x d` before projection.
    pub fn pool_source_video(&self, g: &mut Graph, fused: Var, boundary: MomentBoundary) -> Result<Var> {
        let (frames, _) = g.shape(fused);
        match self.config.source_pooling {
            SourcePooling::Full => g.mean_rows(fused),
            SourcePooling::Moment => {
                if boundary.end >= frames {
                    return Err(Error::domain(
                        "pool_source_video",
                        format!("moment [{}, {}] outside {frames} frames", boundary.start, boundary.end),
                    ));
                }
                let span = g.slice_rows(fused, boundary.start, boundary.len())?;
                g.mean_rows(span)
            }
        }
    }

    pub fn encode_video(&self, raw: &FeatureSequence) -> Result<FeatureSequence> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let v = self.encode_video_graph(&mut g, &b, raw)?;
        FeatureSequence::new(g.value(v).clone())
    }

    pub fn encode_query(&self, tokens: &[usize]) -> Result<FeatureSequence> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let q = self.encode_query_graph(&mut g, &b, tokens)?;
        FeatureSequence::new(g.value(q).clone())
    }

    /// Per-frame cosine similarity between fused frames and the mean-pooled
    /// query, in the configured scoring space.
    pub fn frame_scores(&self, video: &FeatureSequence, query: &[usize]) -> Result<ScoreSequence> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let enc = self.encode_pair(&mut g, &b, video, query)?;
        let pooled = g.mean_rows(enc.query)?;
        let (frames, query) = match self.config.scoring {
            ScoringSpace::Encoded => (enc.fused, pooled),
            ScoringSpace::Source => (
                g.matmul(enc.fused, b.var(self.source_video_proj))?,
                g.matmul(pooled, b.var(self.source_query_proj))?,
            ),
            ScoringSpace::Target => (
                g.matmul(enc.fused, b.var(self.target_video_proj))?,
                g.matmul(pooled, b.var(self.target_query_proj))?,
            ),
        };
        cosine_scores(g.value(frames), g.value(query).data())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    config: ModelConfig,
    seed: u64,
    weights_file: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Sidecar path holding the raw weights of a checkpoint manifest.
pub fn weights_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes a JSON manifest at `path` and the weights as little-endian `f32`
/// in manifest order next to it.
pub fn save_checkpoint(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bin = weights_path(path);
    let mut bytes = Vec::with_capacity(4 * model.scalar_count());
    let mut tensors = Vec::with_capacity(model.store.len());
    for (name, m) in model.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
        });
        for &v in m.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        seed: model.config.seed,
        weights_file: bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_string_pretty(&manifest).expect("checkpoint manifest serialises");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bad = |detail: String| Error::Manifest {
        path: path.to_path_buf(),
        detail,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let mut model = ModelParams::new(manifest.config)?;
    if manifest.tensors.len() != model.store.len() {
        return Err(bad(format!(
            "{} tensors listed, model has {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    for (entry, (name, m)) in manifest.tensors.iter().zip(model.store.iter()) {
        if entry.name != name || entry.rows != m.rows() || entry.cols != m.cols() {
            return Err(bad(format!(
                "tensor {} ({}x{}) does not match {} ({}x{})",
                entry.name,
                entry.rows,
                entry.cols,
                name,
                m.rows(),
                m.cols()
            )));
        }
    }
    let bin = path.with_file_name(&manifest.weights_file);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected = 4 * model.scalar_count();
    if bytes.len() != expected {
        return Err(Error::FileShape {
            sample: "checkpoint".into(),
            file: bin,
            expected_bytes: expected,
            actual_bytes: bytes.len(),
        });
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    model.set_flat(&flat)?;
    Ok(model)
}

/// Rounds every weight through `f32`, matching what a checkpoint stores.
pub fn round_to_f32(model: &mut ModelParams) {
    let flat: Vec<f64> = model.to_flat().into_iter().map(|v| v as f32 as f64).collect();
    model.set_flat(&flat).expect("same length");
}
