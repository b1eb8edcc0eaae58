//! Dataset-level evaluation: score, localise and measure every sample.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DomainDataset, Sample};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::inference::{top_n_moments, MomentBoundary, ScoreSequence};
use crate::metrics::{temporal_iou, MetricsReport};
use crate::model::ModelParams;

/// Produces per-frame scores for a sample.
pub trait FrameScorer: Sync {
    fn scores(&self, sample: &Sample) -> Result<ScoreSequence>;
}

impl FrameScorer for ModelParams {
    fn scores(&self, sample: &Sample) -> Result<ScoreSequence> {
        self.frame_scores(&sample.video, &sample.query)
    }
}

/// Scores 1 inside the annotated moment and 0 elsewhere.
pub struct OracleScorer;

impl FrameScorer for OracleScorer {
    fn scores(&self, sample: &Sample) -> Result<ScoreSequence> {
        let b = sample
            .boundary
            .ok_or_else(|| Error::MissingAnnotation(sample.id.clone()))?;
        ScoreSequence::new(
            (0..sample.video.len())
                .map(|t| if b.contains(t) { 1.0 } else { 0.0 })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub top_n: Vec<usize>,
    pub ious: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.8,
            top_n: vec![1, 5],
            ious: vec![0.3, 0.5, 0.7],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub start: usize,
    pub end: usize,
    pub truth_start: usize,
    pub truth_end: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub samples: Vec<SampleResult>,
}

pub fn evaluate<S: FrameScorer>(
    dataset: &DomainDataset,
    scorer: &S,
    config: &EvalConfig,
    exec: Execution,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.boundary.is_none()) {
        return Err(Error::MissingAnnotation(s.id.clone()));
    }
    let max_n = config.top_n.iter().copied().max().unwrap_or(1).max(1);
    let predictions: Vec<Vec<MomentBoundary>> = exec.try_map(dataset.len(), |i| {
        let scores = scorer.scores(&dataset.samples[i])?;
        Ok::<_, Error>(
            top_n_moments(&scores, config.threshold, max_n)?
                .iter()
                .map(|p| p.boundary())
                .collect(),
        )
    })?;
    let truths: Vec<MomentBoundary> = dataset.samples.iter().map(|s| s.boundary.expect("checked")).collect();
    let report = MetricsReport::compute(&predictions, &truths, &config.top_n, &config.ious, config.threshold)?;
    let samples = dataset
        .samples
        .iter()
        .zip(&predictions)
        .zip(&truths)
        .map(|((s, p), t)| SampleResult {
            id: s.id.clone(),
            start: p[0].start,
            end: p[0].end,
            truth_start: t.start,
            truth_end: t.end,
            iou: temporal_iou(&p[0], t),
        })
        .collect();
    Ok(Evaluation { report, samples })
}

pub fn write_samples_csv<W: Write>(samples: &[SampleResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))
}

pub fn save_samples_csv(samples: &[SampleResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_samples_csv(samples, std::io::BufWriter::new(file))
}
