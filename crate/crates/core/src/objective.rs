//! Training objectives assembled from the model and the loss library.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::inference::MomentBoundary;
use crate::losses::{
    bidirectional_ranking, cross_modal_distribution, domain_alignment, pooled_projection, specific_alignment,
    LossWeights, MmdConfig, Negatives,
};
use crate::model::{Encoded, ModelParams};
use crate::params::Bound;

/// Graph handles of every term of the final objective.
#[derive(Clone, Copy, Debug)]
pub struct Components {
    pub total: Var,
    pub supervised: Var,
    pub domain: Var,
    pub domain_video: Var,
    pub domain_query: Var,
    pub consistency: Var,
    pub distribution: Var,
    pub specific: Var,
}

/// Plain values of [`Components`], as logged per step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub supervised: f64,
    pub domain: f64,
    pub consistency: f64,
    pub distribution: f64,
    pub specific: f64,
}

impl LossRecord {
    pub fn read(g: &Graph, c: &Components) -> Self {
        let v = |x: Var| g.value(x).item();
        LossRecord {
            total: v(c.total),
            supervised: v(c.supervised),
            domain: v(c.domain),
            consistency: v(c.consistency),
            distribution: v(c.distribution),
            specific: v(c.specific),
        }
    }

    /// Supervised-only record.
    pub fn supervised_only(value: f64) -> Self {
        LossRecord {
            total: value,
            supervised: value,
            ..Default::default()
        }
    }

    /// Weighted sum of the components, recomputed from the record.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.supervised
            + w.gamma_domain * self.domain
            + w.gamma_cross_modal * (self.consistency + self.distribution)
            + w.gamma_specific * self.specific
    }

    /// Element-wise mean over several records.
    pub fn mean(records: &[LossRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mut out = LossRecord::default();
        for r in records {
            out.total += r.total;
            out.supervised += r.supervised;
            out.domain += r.domain;
            out.consistency += r.consistency;
            out.distribution += r.distribution;
            out.specific += r.specific;
        }
        out.total /= n;
        out.supervised /= n;
        out.domain /= n;
        out.consistency /= n;
        out.distribution /= n;
        out.specific /= n;
        out
    }
}

/// Symmetric hardest-negative ranking over pooled, source-projected pairs.
pub fn supervised_objective(
    g: &mut Graph,
    b: &Bound,
    model: &ModelParams,
    source: &[Encoded],
    boundaries: &[MomentBoundary],
    margin: f64,
    negatives: Negatives,
) -> Result<Var> {
    if source.len() != boundaries.len() {
        return Err(Error::LengthMismatch {
            expected: source.len(),
            actual: boundaries.len(),
        });
    }
    if source.len() < 2 {
        return Err(Error::BatchTooSmall {
            needed: 2,
            actual: source.len(),
        });
    }
    let videos = source
        .iter()
        .zip(boundaries)
        .map(|(e, &bd)| model.pool_source_video(g, e.fused, bd))
        .collect::<Result<Vec<_>>>()?;
    let videos = g.concat_rows(&videos)?;
    let videos = g.matmul(videos, b.var(model.source_video_proj))?;
    let queries: Vec<Var> = source.iter().map(|e| e.query).collect();
    let queries = pooled_projection(g, &queries, b.var(model.source_query_proj))?;
    bidirectional_ranking(g, videos, queries, margin, model.config.cosine, negatives)
}

/// The weighted multi-task objective over one source and one target batch.
#[allow(clippy::too_many_arguments)]
pub fn final_objective(
    g: &mut Graph,
    b: &Bound,
    model: &ModelParams,
    source: &[Encoded],
    boundaries: &[MomentBoundary],
    target: &[Encoded],
    weights: &LossWeights,
    mmd: MmdConfig,
    negatives: Negatives,
) -> Result<Components> {
    if target.len() < 2 {
        return Err(Error::BatchTooSmall {
            needed: 2,
            actual: target.len(),
        });
    }
    let supervised = supervised_objective(g, b, model, source, boundaries, weights.margin_source, negatives)?;

    let sv: Vec<Var> = source.iter().map(|e| e.video).collect();
    let sq: Vec<Var> = source.iter().map(|e| e.query).collect();
    let tv: Vec<Var> = target.iter().map(|e| e.video).collect();
    let tq: Vec<Var> = target.iter().map(|e| e.query).collect();
    let tf: Vec<Var> = target.iter().map(|e| e.fused).collect();

    let (domain_video, domain_query) = domain_alignment(g, &sv, &sq, &tv, &tq, mmd)?;
    let domain = g.add(domain_video, domain_query)?;

    let pv = pooled_projection(g, &tf, b.var(model.target_video_proj))?;
    let pq = pooled_projection(g, &tq, b.var(model.target_query_proj))?;
    let consistency = bidirectional_ranking(g, pv, pq, weights.margin_target, model.config.cosine, negatives)?;
    let distribution = cross_modal_distribution(g, &tv, &tq)?;

    let per_video = tf
        .iter()
        .map(|&f| specific_alignment(g, f, &tq))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat_rows(&per_video)?;
    let specific = g.mean_rows(stacked)?;

    let weighted_domain = g.scale(domain, weights.gamma_domain);
    let modal = g.add(consistency, distribution)?;
    let weighted_modal = g.scale(modal, weights.gamma_cross_modal);
    let weighted_specific = g.scale(specific, weights.gamma_specific);
    let total = g.add(supervised, weighted_domain)?;
    let total = g.add(total, weighted_modal)?;
    let total = g.add(total, weighted_specific)?;
    Ok(Components {
        total,
        supervised,
        domain,
        domain_video,
        domain_query,
        consistency,
        distribution,
        specific,
    })
}

/// Model variants of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Without domain alignment.
    Da,
    /// Without cross-modal alignment.
    Ma,
    /// Without specific alignment.
    Sa,
}

impl Ablation {
    pub fn apply(self, weights: &LossWeights) -> LossWeights {
        let mut w = *weights;
        match self {
            Ablation::Da => w.gamma_domain = 0.0,
            Ablation::Ma => w.gamma_cross_modal = 0.0,
            Ablation::Sa => w.gamma_specific = 0.0,
        }
        w
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "da" => Ok(Ablation::Da),
            "ma" => Ok(Ablation::Ma),
            "sa" => Ok(Ablation::Sa),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected da, ma or sa)"
            ))),
        }
    }
}
