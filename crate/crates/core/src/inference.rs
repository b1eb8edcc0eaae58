//! Moment localisation from per-frame similarity scores.

use serde::{Deserialize, Serialize};

use crate::diff::{argmax, Matrix};
use crate::error::{Error, Result};

/// Inclusive frame span `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MomentBoundary {
    pub start: usize,
    pub end: usize,
}

impl MomentBoundary {
    /// Checks `start <= end < frames`.
    pub fn new(start: usize, end: usize, frames: usize) -> Result<Self> {
        if start > end || end >= frames {
            return Err(Error::domain(
                "moment boundary",
                format!("[{start}, {end}] is not a valid span of {frames} frames"),
            ));
        }
        Ok(MomentBoundary { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.start <= frame && frame <= self.end
    }

    pub fn contains_span(&self, other: &MomentBoundary) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

/// Per-frame similarity scores of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSequence(Vec<f64>);

impl ScoreSequence {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("scores"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("frame scores".into()));
        }
        Ok(ScoreSequence(scores))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Cosine similarity of each frame (row) to `query`; zero vectors score 0.
pub fn cosine_scores(frames: &Matrix, query: &[f64]) -> Result<ScoreSequence> {
    if frames.cols() != query.len() {
        return Err(Error::DimensionMismatch {
            expected: frames.cols(),
            actual: query.len(),
        });
    }
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scores = (0..frames.rows())
        .map(|t| {
            let row = frames.row(t);
            let dot: f64 = row.iter().zip(query).map(|(a, b)| a * b).sum();
            let fnorm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = fnorm * qn;
            if denom == 0.0 {
                0.0
            } else {
                dot / denom
            }
        })
        .collect();
    ScoreSequence::new(scores)
}

/// A localised moment with the score of the frame it grew from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub start: usize,
    pub end: usize,
    pub peak_score: f64,
}

impl Prediction {
    pub fn boundary(&self) -> MomentBoundary {
        MomentBoundary {
            start: self.start,
            end: self.end,
        }
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::domain(
            "expand_moment",
            format!("threshold {threshold} outside (0, 1]"),
        ));
    }
    Ok(())
}

/// Grows `[seed, seed]` while the next frame's score relative to the
/// boundary frame it would extend stays at or above `threshold`. A side
/// stops once its boundary frame scores `<= 0`.
fn grow(scores: &[f64], seed: usize, threshold: f64) -> MomentBoundary {
    let admits = |candidate: f64, boundary: f64| boundary > 0.0 && candidate / boundary >= threshold;
    let (mut start, mut end) = (seed, seed);
    loop {
        let mut grew = false;
        if start > 0 && admits(scores[start - 1], scores[start]) {
            start -= 1;
            grew = true;
        }
        if end + 1 < scores.len() && admits(scores[end + 1], scores[end]) {
            end += 1;
            grew = true;
        }
        if !grew {
            return MomentBoundary { start, end };
        }
    }
}

/// Seeds at the highest-scoring frame (lowest index on ties) and expands.
pub fn expand_moment(scores: &ScoreSequence, threshold: f64) -> Result<MomentBoundary> {
    check_threshold(threshold)?;
    let (seed, _) = argmax(scores.values());
    Ok(grow(scores.values(), seed, threshold))
}

/// Up to `n` disjoint moments, each expanded from the best remaining frame
/// after masking earlier spans, in order of seed score.
pub fn top_n_moments(scores: &ScoreSequence, threshold: f64, n: usize) -> Result<Vec<Prediction>> {
    check_threshold(threshold)?;
    if n == 0 {
        return Err(Error::Config("top-n requires n >= 1".into()));
    }
    let mut masked = scores.values().to_vec();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (seed, peak) = argmax(&masked);
        if peak == f64::NEG_INFINITY {
            break;
        }
        let span = grow(&masked, seed, threshold);
        for v in &mut masked[span.start..=span.end] {
            *v = f64::NEG_INFINITY;
        }
        out.push(Prediction {
            start: span.start,
            end: span.end,
            peak_score: peak,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: &[f64]) -> ScoreSequence {
        ScoreSequence::new(v.to_vec()).unwrap()
    }

    #[test]
    fn expansion_hand_trace() {
        let b = expand_moment(&scores(&[0.2, 0.85, 1.0, 0.95, 0.3]), 0.9).unwrap();
        assert_eq!((b.start, b.end), (2, 3));
    }

    #[test]
    fn flat_scores_cover_everything() {
        let b = expand_moment(&scores(&[0.4; 7]), 1.0).unwrap();
        assert_eq!((b.start, b.end), (0, 6));
    }

    #[test]
    fn single_frame() {
        let b = expand_moment(&scores(&[-0.3]), 0.8).unwrap();
        assert_eq!((b.start, b.end), (0, 0));
    }

    #[test]
    fn non_positive_boundary_halts() {
        let b = expand_moment(&scores(&[-0.1, -0.05, -0.2]), 0.5).unwrap();
        assert_eq!((b.start, b.end), (1, 1));
    }

    #[test]
    fn threshold_and_empty_errors() {
        assert!(expand_moment(&scores(&[1.0]), 0.0).is_err());
        assert!(expand_moment(&scores(&[1.0]), 1.5).is_err());
        assert!(ScoreSequence::new(vec![]).is_err());
    }

    #[test]
    fn top_one_equals_expand() {
        let s = scores(&[0.1, 0.5, 0.45, 0.9, 0.88, 0.2]);
        let top = top_n_moments(&s, 0.8, 1).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].boundary(), expand_moment(&s, 0.8).unwrap());
    }

    #[test]
    fn bimodal_scores_give_two_ordered_moments() {
        let s = scores(&[0.1, 0.8, 0.9, 0.85, 0.1, 0.1, 0.6, 0.7, 0.65, 0.1]);
        let top = top_n_moments(&s, 0.8, 2).unwrap();
        assert_eq!(top[0].boundary(), MomentBoundary { start: 1, end: 3 });
        assert_eq!(top[1].boundary(), MomentBoundary { start: 6, end: 8 });
        assert!(top[0].peak_score > top[1].peak_score);
    }

    #[test]
    fn exhaustion_returns_fewer() {
        let top = top_n_moments(&scores(&[0.5, 0.5, 0.5]), 0.8, 5).unwrap();
        assert_eq!(top.len(), 1);
    }

    #[test]
    fn cosine_scores_cases() {
        let frames = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [3.0, 4.0]]).unwrap();
        let s = cosine_scores(&frames, &[3.0, 4.0]).unwrap();
        assert!((s.values()[2] - 1.0).abs() < 1e-15);
        let s = cosine_scores(&frames.slice_rows(0, 1), &[0.0, 5.0]).unwrap();
        assert_eq!(s.values(), &[0.0]);
        assert!(cosine_scores(&frames, &[1.0]).is_err());
    }

    #[test]
    fn boundary_validation() {
        assert!(MomentBoundary::new(2, 1, 5).is_err());
        assert!(MomentBoundary::new(0, 5, 5).is_err());
        assert_eq!(MomentBoundary::new(1, 3, 5).unwrap().len(), 3);
    }
}
