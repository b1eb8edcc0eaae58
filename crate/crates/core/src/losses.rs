//! Alignment and ranking losses.
//!
//! Every loss is built on the graph so it can be differentiated, and most
//! have a value-level wrapper taking plain vectors. Distribution statistics
//! follow the usual conventions: `mu` is the row mean of one sequence, `sigma`
//! the population standard deviation of a set of such means.

use serde::{Deserialize, Serialize};

use crate::diff::{argmax, Axis, Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::xmodal::{cosine_matrix, CosineMode};

/// Smallest kernel bandwidth the median heuristic may return.
pub const MIN_BANDWIDTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdVariant {
    /// Biased MMD^2 estimator with a `-2` cross term.
    #[default]
    Standard,
    /// All-positive cross term with coefficient `+1`.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum Bandwidth {
    /// Median pairwise distance over the union of both sets.
    #[default]
    Median,
    Fixed(f64),
}

/// Loss weights and margins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub gamma_domain: f64,
    pub gamma_cross_modal: f64,
    pub gamma_specific: f64,
    pub margin_source: f64,
    pub margin_target: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma_domain: 1.0,
            gamma_cross_modal: 0.5,
            gamma_specific: 0.2,
            margin_source: 0.2,
            margin_target: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gamma_domain,
            self.gamma_cross_modal,
            self.gamma_specific,
            self.margin_source,
            self.margin_target,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(
                "loss weights and margins must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Which non-matching items a ranking anchor is compared against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Negatives {
    /// The most similar non-matching item of the batch.
    #[default]
    Hardest,
    /// Mean hinge over every non-matching item. Unlike hardest negatives it
    /// does not stall when all representations start out nearly collinear.
    All,
}

/// MMD configuration shared by the domain alignment terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmdConfig {
    pub variant: MmdVariant,
    pub bandwidth: Bandwidth,
}

// ---------------------------------------------------------------------------
// Distribution statistics

/// Row mean of a sequence, `1 x d`.
pub fn intra_sample_mean(g: &mut Graph, seq: Var) -> Result<Var> {
    g.mean_rows(seq)
}

/// Population standard deviation of a set of `1 x d` means.
pub fn inter_sample_std(g: &mut Graph, means: &[Var]) -> Result<Var> {
    if means.is_empty() {
        return Err(Error::Empty("inter_sample_std"));
    }
    let stacked = g.concat_rows(means)?;
    g.std_rows(stacked)
}

pub fn mean_of_rows(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = Matrix::from_rows(rows).map_err(|_| Error::Empty("intra_sample_mean"))?;
    Ok(m.mean_rows())
}

pub fn std_of_means(means: &[Vec<f64>]) -> Result<Vec<f64>> {
    if means.is_empty() {
        return Err(Error::Empty("inter_sample_std"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = means.iter().map(|m| g.leaf(Matrix::row_vector(m))).collect();
    let s = inter_sample_std(&mut g, &vars)?;
    Ok(g.value(s).data().to_vec())
}

// ---------------------------------------------------------------------------
// Kernels and MMD

/// `exp(-|u - w|^2 / (2 bandwidth^2))`.
pub fn gaussian_kernel(u: &[f64], w: &[f64], bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0) {
        return Err(Error::domain(
            "gaussian_kernel",
            format!("bandwidth {bandwidth} must be positive"),
        ));
    }
    if u.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: w.len(),
        });
    }
    let d2: f64 = u.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-d2 / (2.0 * bandwidth * bandwidth)).exp())
}

/// Squared Euclidean distances between the rows of `a` and `b`.
fn squared_distances(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (na, d) = g.shape(a);
    let (nb, _) = g.shape(b);
    let ones_d = g.leaf(Matrix::filled(d, 1, 1.0));
    let aa = g.mul(a, a)?;
    let a2 = g.matmul(aa, ones_d)?;
    let bb = g.mul(b, b)?;
    let b2 = g.matmul(bb, ones_d)?;
    let ones_b = g.leaf(Matrix::filled(1, nb, 1.0));
    let ones_a = g.leaf(Matrix::filled(na, 1, 1.0));
    let a2_rows = g.matmul(a2, ones_b)?;
    let b2t = g.transpose(b2);
    let b2_cols = g.matmul(ones_a, b2t)?;
    let bt = g.transpose(b);
    let ab = g.matmul(a, bt)?;
    let ab2 = g.scale(ab, -2.0);
    let s = g.add(a2_rows, b2_cols)?;
    g.add(s, ab2)
}

/// Median pairwise distance over all distinct pairs of rows of `points`,
/// as a differentiable 1x1 node. Falls back to [`MIN_BANDWIDTH`] when the
/// median is smaller or there is only one point.
pub fn median_bandwidth(g: &mut Graph, points: &[Var]) -> Result<Var> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let (a, b) = (g.value(points[i]), g.value(points[j]));
            let d2: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            pairs.push((d2, i, j));
        }
    }
    if pairs.is_empty() {
        return Ok(g.constant_scalar(MIN_BANDWIDTH));
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mid = pairs.len() / 2;
    let picks: Vec<(usize, usize)> = if pairs.len() % 2 == 1 {
        vec![(pairs[mid].1, pairs[mid].2)]
    } else {
        vec![(pairs[mid - 1].1, pairs[mid - 1].2), (pairs[mid].1, pairs[mid].2)]
    };
    let mut dists = Vec::with_capacity(picks.len());
    for (i, j) in picks {
        let diff = g.sub(points[i], points[j])?;
        dists.push(g.l2_norm(diff));
    }
    let median = if dists.len() == 1 {
        dists[0]
    } else {
        let s = g.add(dists[0], dists[1])?;
        g.scale(s, 0.5)
    };
    if g.value(median).item() < MIN_BANDWIDTH {
        return Ok(g.constant_scalar(MIN_BANDWIDTH));
    }
    Ok(median)
}

/// MMD between two sets of `1 x d` rows with a bandwidth node.
pub fn mmd_with_bandwidth(g: &mut Graph, u: &[Var], w: &[Var], variant: MmdVariant, bandwidth: Var) -> Result<Var> {
    if u.is_empty() || w.is_empty() {
        return Err(Error::Empty("mmd"));
    }
    let us = g.concat_rows(u)?;
    let ws = g.concat_rows(w)?;
    let two_bw2 = {
        let sq = g.mul(bandwidth, bandwidth)?;
        g.scale(sq, 2.0)
    };
    let one = g.constant_scalar(1.0);
    let inv = g.safe_div(one, two_bw2)?;

    let kernel_mean = |g: &mut Graph, a: Var, b: Var| -> Result<Var> {
        let d = squared_distances(g, a, b)?;
        let scaled = g.mul_scalar(d, inv)?;
        let neg = g.scale(scaled, -1.0);
        let k = g.exp(neg);
        let (r, c) = g.shape(k);
        let s = g.sum(k);
        Ok(g.scale(s, 1.0 / (r * c) as f64))
    };
    let kuu = kernel_mean(g, us, us)?;
    let kww = kernel_mean(g, ws, ws)?;
    let kuw = kernel_mean(g, us, ws)?;
    let within = g.add(kuu, kww)?;
    let cross = match variant {
        MmdVariant::Standard => g.scale(kuw, -2.0),
        MmdVariant::Literal => kuw,
    };
    g.add(within, cross)
}

pub fn resolve_bandwidth(g: &mut Graph, u: &[Var], w: &[Var], policy: Bandwidth) -> Result<Var> {
    match policy {
        Bandwidth::Fixed(h) => {
            if !(h > 0.0) {
                return Err(Error::domain("mmd", format!("bandwidth {h} must be positive")));
            }
            Ok(g.constant_scalar(h))
        }
        Bandwidth::Median => {
            let all: Vec<Var> = u.iter().chain(w).copied().collect();
            median_bandwidth(g, &all)
        }
    }
}

/// MMD between two sets of `1 x d` rows.
pub fn mmd_graph(g: &mut Graph, u: &[Var], w: &[Var], config: MmdConfig) -> Result<Var> {
    if u.is_empty() || w.is_empty() {
        return Err(Error::Empty("mmd"));
    }
    let bw = resolve_bandwidth(g, u, w, config.bandwidth)?;
    mmd_with_bandwidth(g, u, w, config.variant, bw)
}

pub fn mmd(u: &[Vec<f64>], w: &[Vec<f64>], config: MmdConfig) -> Result<f64> {
    let mut g = Graph::new();
    let uv: Vec<Var> = u.iter().map(|r| g.leaf(Matrix::row_vector(r))).collect();
    let wv: Vec<Var> = w.iter().map(|r| g.leaf(Matrix::row_vector(r))).collect();
    let out = mmd_graph(&mut g, &uv, &wv, config)?;
    Ok(g.value(out).item())
}

/// MMD between per-sample means plus MMD between the two singleton std
/// vectors, sharing one bandwidth derived from the means.
pub fn domain_term(g: &mut Graph, source: &[Var], target: &[Var], config: MmdConfig) -> Result<Var> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Empty("domain alignment batch"));
    }
    let source_means = source
        .iter()
        .map(|&s| intra_sample_mean(g, s))
        .collect::<Result<Vec<_>>>()?;
    let target_means = target
        .iter()
        .map(|&s| intra_sample_mean(g, s))
        .collect::<Result<Vec<_>>>()?;
    let bw = resolve_bandwidth(g, &source_means, &target_means, config.bandwidth)?;
    let mean_term = mmd_with_bandwidth(g, &source_means, &target_means, config.variant, bw)?;
    let source_std = inter_sample_std(g, &source_means)?;
    let target_std = inter_sample_std(g, &target_means)?;
    let std_term = mmd_with_bandwidth(g, &[source_std], &[target_std], config.variant, bw)?;
    g.add(mean_term, std_term)
}

/// Video and query domain alignment terms.
pub fn domain_alignment(
    g: &mut Graph,
    source_videos: &[Var],
    source_queries: &[Var],
    target_videos: &[Var],
    target_queries: &[Var],
    config: MmdConfig,
) -> Result<(Var, Var)> {
    let video = domain_term(g, source_videos, target_videos, config)?;
    let query = domain_term(g, source_queries, target_queries, config)?;
    Ok((video, query))
}

// ---------------------------------------------------------------------------
// Ranking losses

/// `sum_n max(0, margin - positive + negative_n)`.
pub fn triplet_loss(positive: f64, negatives: &[f64], margin: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Empty("triplet negatives"));
    }
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("margin {margin} must be non-negative")));
    }
    Ok(negatives.iter().map(|n| (margin - positive + n).max(0.0)).sum())
}

/// Index of the most similar non-matching column for every row of a square
/// similarity matrix. Ties resolve to the lowest index.
pub fn hardest_negatives(sims: &Matrix) -> Result<Vec<usize>> {
    let (rows, cols) = sims.shape();
    if rows != cols {
        return Err(Error::ShapeMismatch {
            op: "hardest_negatives",
            left: (rows, cols),
            right: (cols, rows),
        });
    }
    if rows < 2 {
        return Err(Error::BatchTooSmall {
            needed: 2,
            actual: rows,
        });
    }
    Ok((0..rows)
        .map(|i| {
            let masked: Vec<f64> = sims
                .row(i)
                .iter()
                .enumerate()
                .map(|(j, &v)| if j == i { f64::NEG_INFINITY } else { v })
                .collect();
            argmax(&masked).0
        })
        .collect())
}

/// Symmetric triplet ranking over a batch of paired sequence-level
/// representations.
///
/// `videos` and `queries` are `B x d` with matching pairs on the same row.
/// Each direction is averaged over its anchors (and, for
/// [`Negatives::All`], over the negatives of each anchor).
pub fn bidirectional_ranking(
    g: &mut Graph,
    videos: Var,
    queries: Var,
    margin: f64,
    mode: CosineMode,
    negatives: Negatives,
) -> Result<Var> {
    let (b, _) = g.shape(videos);
    if b < 2 {
        return Err(Error::BatchTooSmall { needed: 2, actual: b });
    }
    if g.shape(queries) != g.shape(videos) {
        return Err(Error::ShapeMismatch {
            op: "bidirectional_ranking",
            left: g.shape(videos),
            right: g.shape(queries),
        });
    }
    // sims[i][j] = sim(video i, query j)
    let sims = cosine_matrix(g, videos, queries, mode)?;
    if negatives == Negatives::All {
        return all_negative_ranking(g, sims, b, margin);
    }
    let values = g.value(sims).clone();
    let video_negs = hardest_negatives(&values)?;
    let query_negs = hardest_negatives(&values.transpose())?;

    let mut terms = Vec::with_capacity(2 * b);
    for i in 0..b {
        let pos = g.pick(sims, i, i)?;
        // video anchor i against its hardest non-matching query
        let neg = g.pick(sims, i, video_negs[i])?;
        terms.push(hinge_term(g, pos, neg, margin)?);
    }
    let video_dir = mean_scalars(g, &terms)?;
    terms.clear();
    for j in 0..b {
        let pos = g.pick(sims, j, j)?;
        // query anchor j against its hardest non-matching video
        let neg = g.pick(sims, query_negs[j], j)?;
        terms.push(hinge_term(g, pos, neg, margin)?);
    }
    let query_dir = mean_scalars(g, &terms)?;
    g.add(query_dir, video_dir)
}

fn all_negative_ranking(g: &mut Graph, sims: Var, b: usize, margin: f64) -> Result<Var> {
    let (mut video_terms, mut query_terms) = (Vec::new(), Vec::new());
    for i in 0..b {
        for j in (0..b).filter(|&j| j != i) {
            let neg = g.pick(sims, i, j)?;
            let video_pos = g.pick(sims, i, i)?;
            video_terms.push(hinge_term(g, video_pos, neg, margin)?);
            let query_pos = g.pick(sims, j, j)?;
            query_terms.push(hinge_term(g, query_pos, neg, margin)?);
        }
    }
    let video_dir = mean_scalars(g, &video_terms)?;
    let query_dir = mean_scalars(g, &query_terms)?;
    g.add(video_dir, query_dir)
}

fn hinge_term(g: &mut Graph, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let gap = g.sub(neg, pos)?;
    let shifted = g.add_scalar(gap, margin);
    Ok(g.hinge(shifted))
}

fn mean_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let stacked = g.concat_rows(terms)?;
    g.mean_rows(stacked)
}

/// Mean-pools each sequence and projects it with `projection`, giving a
/// `B x d` batch of sequence-level representations.
pub fn pooled_projection(g: &mut Graph, sequences: &[Var], projection: Var) -> Result<Var> {
    let pooled = sequences.iter().map(|&s| g.mean_rows(s)).collect::<Result<Vec<_>>>()?;
    let stacked = g.concat_rows(&pooled)?;
    g.matmul(stacked, projection)
}

// ---------------------------------------------------------------------------
// Cross-modal distribution and specific alignment

/// `sum_k |mu(V_k) - mu(Q_k)|^2 + |sigma(V) - sigma(Q)|^2` over paired sequences.
pub fn cross_modal_distribution(g: &mut Graph, videos: &[Var], queries: &[Var]) -> Result<Var> {
    if videos.is_empty() {
        return Err(Error::Empty("cross-modal distribution batch"));
    }
    if videos.len() != queries.len() {
        return Err(Error::LengthMismatch {
            expected: videos.len(),
            actual: queries.len(),
        });
    }
    let mut video_means = Vec::with_capacity(videos.len());
    let mut query_means = Vec::with_capacity(videos.len());
    let mut terms = Vec::with_capacity(videos.len() + 1);
    for (&v, &q) in videos.iter().zip(queries) {
        let mv = g.mean_rows(v)?;
        let mq = g.mean_rows(q)?;
        let diff = g.sub(mv, mq)?;
        let sq = g.mul(diff, diff)?;
        terms.push(g.sum(sq));
        video_means.push(mv);
        query_means.push(mq);
    }
    let sv = inter_sample_std(g, &video_means)?;
    let sq = inter_sample_std(g, &query_means)?;
    let diff = g.sub(sv, sq)?;
    let sq = g.mul(diff, diff)?;
    terms.push(g.sum(sq));
    let stacked = g.concat_rows(&terms)?;
    Ok(g.sum(stacked))
}

/// Per-frame similarity to a whole query matrix:
/// `|Q v_c| / (|v_c| |Q|_F)`, one column per frame, `T x 1`.
pub fn frame_query_similarity(g: &mut Graph, frames: Var, query: Var) -> Result<Var> {
    let qt = g.transpose(query);
    let projected = g.matmul(frames, qt)?;
    let num = g.row_norms(projected);
    let frame_norms = g.row_norms(frames);
    let query_norm = g.l2_norm(query);
    let denom = g.mul_scalar(frame_norms, query_norm)?;
    g.safe_div(num, denom)
}

/// `-sum_c log max_l softmax_l(sim(v_c, Q_l))` for one video's frames.
pub fn specific_alignment(g: &mut Graph, frames: Var, queries: &[Var]) -> Result<Var> {
    if queries.is_empty() {
        return Err(Error::Empty("specific alignment queries"));
    }
    let sims = queries
        .iter()
        .map(|&q| frame_query_similarity(g, frames, q))
        .collect::<Result<Vec<_>>>()?;
    let table = g.concat_cols(&sims)?;
    let probs = g.row_softmax(table);
    let best = g.max_axis(probs, Axis::Cols)?;
    let logs = g.log(best)?;
    let total = g.sum(logs);
    Ok(g.scale(total, -1.0))
}

pub fn specific_alignment_loss(frames: &Matrix, queries: &[Matrix]) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.leaf(frames.clone());
    let qs: Vec<Var> = queries.iter().map(|q| g.leaf(q.clone())).collect();
    let out = specific_alignment(&mut g, f, &qs)?;
    Ok(g.value(out).item())
}
