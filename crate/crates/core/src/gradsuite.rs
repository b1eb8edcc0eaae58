//! Finite-difference check of every differentiable operation, encoder block
//! and training loss over many seeded random instances.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diff::{analytic_gradients, grad_check_against, Axis, GradCheckReport, Graph, Matrix, Var};
use crate::encoders::{BiGru, EncoderOrder, GruCell, MultiHeadAttention, SequenceEncoder};
use crate::error::Result;
use crate::exec::Execution;
use crate::inference::MomentBoundary;
use crate::losses::{
    bidirectional_ranking, cross_modal_distribution, domain_term, median_bandwidth, mmd_graph, pooled_projection,
    specific_alignment, Bandwidth, LossWeights, MmdConfig, MmdVariant, Negatives,
};
use crate::model::{Encoded, ModelConfig, ModelParams};
use crate::objective::{final_objective, supervised_objective};
use crate::params::{Bound, ParamStore};
use crate::xmodal::{attend, column_softmax, cosine_matrix, CosineMode, Fusion};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync>;

/// One random problem: the inputs to differentiate and the scalar graph.
pub struct Instance {
    pub inputs: Vec<Matrix>,
    pub build: Build,
}

pub struct Case {
    pub name: &'static str,
    make: fn(&mut ChaCha8Rng) -> Instance,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_instance: usize,
    /// Analytic and numeric derivative at the worst entry.
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub cases: Vec<CaseResult>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn worst(&self) -> &CaseResult {
        self.cases
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("suite has cases")
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().max_rel_error
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    /// Perturbs the analytic gradient of the named case, to prove the suite
    /// notices a broken backward pass.
    pub corrupt: Option<String>,
    pub exec: Execution,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            instances: 100,
            step: STEP,
            corrupt: None,
            exec: Execution::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Random inputs

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn normalish(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    uniform(rng, rows, cols, -1.0, 1.0)
}

/// Entries with magnitude in `[lo, hi)` and random sign, away from kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4))
}

/// `sum(x * w)` with a fixed random `w`, so no output entry has a
/// structurally zero gradient.
fn weighted(g: &mut Graph, x: Var, w: &Matrix) -> Result<Var> {
    let wv = g.leaf(w.clone());
    let p = g.mul(x, wv)?;
    Ok(g.sum(p))
}

macro_rules! unary {
    ($rng:ident, $input:expr, |$g:ident, $x:ident| $body:expr) => {{
        let input: Matrix = $input;
        reduced(
            vec![input],
            move |$g: &mut Graph, v: &[Var]| {
                let $x = v[0];
                $body
            },
            $rng,
        )
    }};
}

/// Weights for a graph output whose shape is only known after building once.
fn output_weights(
    inputs: &[Matrix],
    build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
    rng: &mut ChaCha8Rng,
) -> Matrix {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let out = build(&mut g, &vars).expect("case builds");
    let (r, c) = g.shape(out);
    normalish(rng, r, c)
}

/// Wraps a non-scalar graph with a random weighted reduction.
fn reduced<F>(inputs: Vec<Matrix>, f: F, rng: &mut ChaCha8Rng) -> Instance
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync + 'static,
{
    let w = output_weights(&inputs, &f, rng);
    Instance {
        inputs,
        build: Box::new(move |g, v| {
            let out = f(g, v)?;
            weighted(g, out, &w)
        }),
    }
}

/// Inputs of a module: its parameters followed by `extra`.
fn with_params(store: &ParamStore, extra: Vec<Matrix>) -> Vec<Matrix> {
    store.iter().map(|(_, m)| m.clone()).chain(extra).collect()
}

fn bound(store: &ParamStore, v: &[Var]) -> Bound {
    Bound::from_vars(v[..store.len()].to_vec())
}

fn seq_lengths(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

// ---------------------------------------------------------------------------
// Cases

fn case_add(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    reduced(
        vec![normalish(rng, r, c), normalish(rng, r, c)],
        |g, v| g.add(v[0], v[1]),
        rng,
    )
}

fn case_sub(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    reduced(
        vec![normalish(rng, r, c), normalish(rng, r, c)],
        |g, v| g.sub(v[0], v[1]),
        rng,
    )
}

fn case_mul(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    reduced(
        vec![normalish(rng, r, c), normalish(rng, r, c)],
        |g, v| g.mul(v[0], v[1]),
        rng,
    )
}

fn case_div(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    reduced(
        vec![normalish(rng, r, c), away_from_zero(rng, r, c, 0.5, 1.5)],
        |g, v| g.safe_div(v[0], v[1]),
        rng,
    )
}

fn case_add_row(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    reduced(
        vec![normalish(rng, r, c), normalish(rng, 1, c)],
        |g, v| g.add_row(v[0], v[1]),
        rng,
    )
}

fn case_mul_scalar(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    reduced(
        vec![normalish(rng, r, c), normalish(rng, 1, 1)],
        |g, v| g.mul_scalar(v[0], v[1]),
        rng,
    )
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Instance {
    let (r, k) = dims(rng);
    let c = rng.random_range(1..=4);
    reduced(
        vec![normalish(rng, r, k), normalish(rng, k, c)],
        |g, v| g.matmul(v[0], v[1]),
        rng,
    )
}

fn case_transpose(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, normalish(rng, r, c), |g, x| Ok::<_, crate::error::Error>(
        g.transpose(x)
    ))
}

fn case_concat_cols(rng: &mut ChaCha8Rng) -> Instance {
    let r = rng.random_range(1..=4);
    let (a, b) = dims(rng);
    reduced(
        vec![normalish(rng, r, a), normalish(rng, r, b)],
        |g, v| g.concat_cols(&[v[0], v[1]]),
        rng,
    )
}

fn case_concat_rows(rng: &mut ChaCha8Rng) -> Instance {
    let c = rng.random_range(1..=4);
    let (a, b) = dims(rng);
    reduced(
        vec![normalish(rng, a, c), normalish(rng, b, c)],
        |g, v| g.concat_rows(&[v[0], v[1]]),
        rng,
    )
}

fn case_slice_rows(rng: &mut ChaCha8Rng) -> Instance {
    let rows = rng.random_range(2..=5);
    let start = rng.random_range(0..rows);
    let len = rng.random_range(1..=rows - start);
    let c = rng.random_range(1..=4);
    unary!(rng, normalish(rng, rows, c), |g, x| g.slice_rows(x, start, len))
}

fn case_row(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    let k = rng.random_range(0..r);
    unary!(rng, normalish(rng, r, c), |g, x| g.row(x, k))
}

fn case_row_softmax(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, uniform(rng, r, c, -2.0, 2.0), |g, x| Ok::<_, crate::error::Error>(
        g.row_softmax(x)
    ))
}

fn case_mean_rows(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, normalish(rng, r, c), |g, x| g.mean_rows(x))
}

fn case_std_rows(rng: &mut ChaCha8Rng) -> Instance {
    let r = rng.random_range(2..=5);
    let c = rng.random_range(1..=4);
    unary!(rng, normalish(rng, r, c), |g, x| g.std_rows(x))
}

fn case_sum(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, normalish(rng, r, c), |g, x| Ok::<_, crate::error::Error>(g.sum(x)))
}

fn case_row_norms(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, away_from_zero(rng, r, c, 0.2, 1.0), |g, x| Ok::<
        _,
        crate::error::Error,
    >(g.row_norms(x)))
}

fn case_norm(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, away_from_zero(rng, r, c, 0.2, 1.0), |g, x| Ok::<
        _,
        crate::error::Error,
    >(g.l2_norm(x)))
}

fn case_sqrt(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, uniform(rng, r, c, 0.3, 2.0), |g, x| g.sqrt(x))
}

fn case_exp(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, normalish(rng, r, c), |g, x| Ok::<_, crate::error::Error>(g.exp(x)))
}

fn case_log(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, uniform(rng, r, c, 0.3, 2.0), |g, x| g.log(x))
}

fn case_tanh(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, uniform(rng, r, c, -2.0, 2.0), |g, x| Ok::<_, crate::error::Error>(
        g.tanh(x)
    ))
}

fn case_sigmoid(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, uniform(rng, r, c, -3.0, 3.0), |g, x| Ok::<_, crate::error::Error>(
        g.sigmoid(x)
    ))
}

fn case_abs(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, away_from_zero(rng, r, c, 0.1, 1.0), |g, x| Ok::<
        _,
        crate::error::Error,
    >(g.abs(x)))
}

fn case_hinge(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, away_from_zero(rng, r, c, 0.1, 1.0), |g, x| Ok::<
        _,
        crate::error::Error,
    >(g.hinge(x)))
}

fn case_scale(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    let k = rng.random_range(-2.0..2.0);
    unary!(rng, normalish(rng, r, c), |g, x| Ok::<_, crate::error::Error>(
        g.scale(x, k)
    ))
}

fn case_add_scalar(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    let k = rng.random_range(-2.0..2.0);
    unary!(rng, normalish(rng, r, c), |g, x| Ok::<_, crate::error::Error>(
        g.add_scalar(x, k)
    ))
}

fn case_max_axis(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    let axis = if rng.random_bool(0.5) { Axis::Rows } else { Axis::Cols };
    unary!(rng, normalish(rng, r, c), |g, x| g.max_axis(x, axis))
}

fn case_pick(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
    unary!(rng, normalish(rng, r, c), |g, x| g.pick(x, i, j))
}

fn case_cosine_matrix(rng: &mut ChaCha8Rng) -> Instance {
    let d = rng.random_range(2..=4);
    let (a, b) = dims(rng);
    let mode = if rng.random_bool(0.5) {
        CosineMode::Signed
    } else {
        CosineMode::Absolute
    };
    reduced(
        vec![normalish(rng, a, d), normalish(rng, b, d)],
        move |g, v| cosine_matrix(g, v[0], v[1], mode),
        rng,
    )
}

fn case_column_softmax(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, uniform(rng, r, c, -2.0, 2.0), |g, x| Ok::<_, crate::error::Error>(
        column_softmax(g, x)
    ))
}

fn case_attention(rng: &mut ChaCha8Rng) -> Instance {
    let d = rng.random_range(2..=4);
    let (t, n) = (rng.random_range(1..=4), rng.random_range(1..=3));
    reduced(
        vec![normalish(rng, t, d), normalish(rng, n, d), normalish(rng, t, n)],
        |g, v| {
            let (x, y) = attend(g, v[0], v[1], v[2])?;
            g.concat_cols(&[x, y])
        },
        rng,
    )
}

fn case_multi_head_attention(rng: &mut ChaCha8Rng) -> Instance {
    let heads = rng.random_range(1..=2);
    let dim = heads * rng.random_range(1..=2);
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(rng.random());
    let mha = MultiHeadAttention::new(&mut store, &mut init, "mha", dim, heads).expect("valid heads");
    let t = rng.random_range(1..=4);
    let inputs = with_params(&store, vec![normalish(rng, t, dim)]);
    let k = store.len();
    reduced(inputs, move |g, v| mha.forward(g, &bound(&store, v), v[k]), rng)
}

fn case_gru(rng: &mut ChaCha8Rng) -> Instance {
    let (input, hidden) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(rng.random());
    let cell = GruCell::new(&mut store, &mut init, "gru", input, hidden);
    let t = rng.random_range(1..=4);
    let reverse = rng.random_bool(0.5);
    let inputs = with_params(&store, vec![normalish(rng, t, input)]);
    let k = store.len();
    reduced(inputs, move |g, v| cell.run(g, &bound(&store, v), v[k], reverse), rng)
}

fn case_bigru(rng: &mut ChaCha8Rng) -> Instance {
    let (input, hidden) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(rng.random());
    let gru = BiGru::new(&mut store, &mut init, "bigru", input, hidden);
    let t = rng.random_range(1..=4);
    let inputs = with_params(&store, vec![normalish(rng, t, input)]);
    let k = store.len();
    reduced(inputs, move |g, v| gru.forward(g, &bound(&store, v), v[k]), rng)
}

fn case_sequence_encoder(rng: &mut ChaCha8Rng) -> Instance {
    let order = if rng.random_bool(0.5) {
        EncoderOrder::AttentionFirst
    } else {
        EncoderOrder::RecurrentFirst
    };
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(rng.random());
    let enc = SequenceEncoder::new(&mut store, &mut init, "enc", order, 4, 2, 2, 2).expect("valid");
    let t = rng.random_range(1..=3);
    let inputs = with_params(&store, vec![normalish(rng, t, 4)]);
    let k = store.len();
    reduced(inputs, move |g, v| enc.forward(g, &bound(&store, v), v[k]), rng)
}

fn case_fusion(rng: &mut ChaCha8Rng) -> Instance {
    let d = 2;
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(rng.random());
    let fusion = Fusion::new(&mut store, &mut init, d, 2);
    let (t, n) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let inputs = with_params(&store, vec![normalish(rng, t, d), normalish(rng, n, d)]);
    let k = store.len();
    reduced(
        inputs,
        move |g, v| fusion.fuse_encoded(g, &bound(&store, v), v[k], v[k + 1], CosineMode::Signed),
        rng,
    )
}

fn case_median_bandwidth(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(2..=5);
    let d = rng.random_range(1..=3);
    let inputs: Vec<Matrix> = (0..n).map(|_| normalish(rng, 1, d)).collect();
    Instance {
        inputs,
        build: Box::new(median_bandwidth),
    }
}

fn case_mmd(rng: &mut ChaCha8Rng) -> Instance {
    let (a, b) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let d = rng.random_range(1..=3);
    let config = MmdConfig {
        variant: if rng.random_bool(0.5) {
            MmdVariant::Standard
        } else {
            MmdVariant::Literal
        },
        bandwidth: if rng.random_bool(0.5) {
            Bandwidth::Median
        } else {
            Bandwidth::Fixed(rng.random_range(0.5..2.0))
        },
    };
    let inputs: Vec<Matrix> = (0..a + b).map(|_| normalish(rng, 1, d)).collect();
    Instance {
        inputs,
        build: Box::new(move |g, v| mmd_graph(g, &v[..a], &v[a..], config)),
    }
}

/// `count` sequences of random lengths in `[lo, hi]`, width `d`.
fn sequences(rng: &mut ChaCha8Rng, count: usize, lo: usize, hi: usize, d: usize) -> Vec<Matrix> {
    seq_lengths(rng, count, lo, hi)
        .into_iter()
        .map(|t| normalish(rng, t, d))
        .collect()
}

fn domain_case(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Instance {
    let (s, t) = (rng.random_range(2..=3), rng.random_range(2..=3));
    let d = 3;
    let mut inputs = sequences(rng, s, lo, hi, d);
    // shifted target so the two domains differ
    inputs.extend(sequences(rng, t, lo, hi, d).into_iter().map(|m| m.map(|x| x + 0.5)));
    Instance {
        inputs,
        build: Box::new(move |g, v| domain_term(g, &v[..s], &v[s..], MmdConfig::default())),
    }
}

fn case_domain_video(rng: &mut ChaCha8Rng) -> Instance {
    domain_case(rng, 3, 5)
}

fn case_domain_query(rng: &mut ChaCha8Rng) -> Instance {
    domain_case(rng, 1, 3)
}

fn case_consistency(rng: &mut ChaCha8Rng) -> Instance {
    let b = rng.random_range(2..=4);
    let d = 3;
    let mut inputs = sequences(rng, b, 2, 4, d);
    inputs.extend(sequences(rng, b, 1, 3, d));
    inputs.push(normalish(rng, d, d));
    inputs.push(normalish(rng, d, d));
    let margin = LossWeights::default().margin_target;
    let negatives = random_negatives(rng);
    Instance {
        inputs,
        build: Box::new(move |g, v| {
            let pv = pooled_projection(g, &v[..b], v[2 * b])?;
            let pq = pooled_projection(g, &v[b..2 * b], v[2 * b + 1])?;
            bidirectional_ranking(g, pv, pq, margin, CosineMode::Signed, negatives)
        }),
    }
}

fn case_distribution(rng: &mut ChaCha8Rng) -> Instance {
    let b = rng.random_range(1..=4);
    let d = 3;
    let mut inputs = sequences(rng, b, 2, 4, d);
    inputs.extend(sequences(rng, b, 1, 3, d));
    Instance {
        inputs,
        build: Box::new(move |g, v| cross_modal_distribution(g, &v[..b], &v[b..])),
    }
}

fn case_specific(rng: &mut ChaCha8Rng) -> Instance {
    let q = rng.random_range(1..=3);
    let d = 3;
    let t = rng.random_range(1..=4);
    let mut inputs = vec![away_from_zero(rng, t, d, 0.1, 1.0)];
    inputs.extend(sequences(rng, q, 1, 3, d));
    Instance {
        inputs,
        build: Box::new(move |g, v| specific_alignment(g, v[0], &v[1..])),
    }
}

fn tiny_model(rng: &mut ChaCha8Rng) -> ModelParams {
    ModelParams::new(ModelConfig {
        video_input_dim: 3,
        vocab_size: 5,
        dim: 3,
        hidden: 2,
        heads: 1,
        seed: rng.random(),
        ..ModelConfig::default()
    })
    .expect("valid config")
}

/// Binds `model`'s weights as constants except its four projections, which
/// come from `proj`.
fn bind_with_projections(g: &mut Graph, model: &ModelParams, proj: &[Var]) -> Bound {
    let ids = [
        model.source_video_proj,
        model.source_query_proj,
        model.target_video_proj,
        model.target_query_proj,
    ];
    let vars = model
        .store
        .ids()
        .map(|id| match ids.iter().position(|&p| p == id) {
            Some(k) => proj[k],
            None => g.leaf(model.store.get(id).clone()),
        })
        .collect();
    Bound::from_vars(vars)
}

fn projections(model: &ModelParams) -> Vec<Matrix> {
    [
        model.source_video_proj,
        model.source_query_proj,
        model.target_video_proj,
        model.target_query_proj,
    ]
    .iter()
    .map(|&id| model.store.get(id).clone())
    .collect()
}

/// Random encoded batch: per sample a video, a query and fused frames, plus
/// a moment inside each video.
fn encoded_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> (Vec<Matrix>, Vec<MomentBoundary>) {
    let mut inputs = Vec::with_capacity(3 * b);
    let mut bounds = Vec::with_capacity(b);
    for _ in 0..b {
        let t = rng.random_range(2..=4);
        let n = rng.random_range(1..=3);
        inputs.push(normalish(rng, t, d));
        inputs.push(normalish(rng, n, d));
        inputs.push(normalish(rng, t, d));
        let s = rng.random_range(0..t);
        let e = rng.random_range(s..t);
        bounds.push(MomentBoundary { start: s, end: e });
    }
    (inputs, bounds)
}

fn random_negatives(rng: &mut ChaCha8Rng) -> Negatives {
    if rng.random_bool(0.5) {
        Negatives::All
    } else {
        Negatives::Hardest
    }
}

fn as_encoded(v: &[Var]) -> Vec<Encoded> {
    v.chunks(3)
        .map(|c| Encoded {
            video: c[0],
            query: c[1],
            fused: c[2],
        })
        .collect()
}

fn case_supervised(rng: &mut ChaCha8Rng) -> Instance {
    let model = tiny_model(rng);
    let b = rng.random_range(2..=3);
    let (mut inputs, bounds) = encoded_batch(rng, b, model.config.dim);
    inputs.extend(projections(&model));
    let margin = LossWeights::default().margin_source;
    let negatives = random_negatives(rng);
    Instance {
        inputs,
        build: Box::new(move |g, v| {
            let bd = bind_with_projections(g, &model, &v[3 * b..]);
            supervised_objective(g, &bd, &model, &as_encoded(&v[..3 * b]), &bounds, margin, negatives)
        }),
    }
}

fn case_final(rng: &mut ChaCha8Rng) -> Instance {
    let model = tiny_model(rng);
    let (bs, bt) = (rng.random_range(2..=3), rng.random_range(2..=3));
    let (mut inputs, bounds) = encoded_batch(rng, bs, model.config.dim);
    let (target, _) = encoded_batch(rng, bt, model.config.dim);
    inputs.extend(target);
    inputs.extend(projections(&model));
    let weights = LossWeights::default();
    let negatives = random_negatives(rng);
    let n = 3 * (bs + bt);
    Instance {
        inputs,
        build: Box::new(move |g, v| {
            let bd = bind_with_projections(g, &model, &v[n..]);
            let src = as_encoded(&v[..3 * bs]);
            let tgt = as_encoded(&v[3 * bs..n]);
            let c = final_objective(
                g,
                &bd,
                &model,
                &src,
                &bounds,
                &tgt,
                &weights,
                MmdConfig::default(),
                negatives,
            )?;
            Ok(c.total)
        }),
    }
}

macro_rules! cases {
    ($($name:literal => $f:ident),* $(,)?) => {
        vec![$(Case { name: $name, make: $f }),*]
    };
}

/// Every case of the suite, in report order.
pub fn cases() -> Vec<Case> {
    cases![
        "add" => case_add,
        "sub" => case_sub,
        "mul" => case_mul,
        "div" => case_div,
        "add_row" => case_add_row,
        "mul_scalar" => case_mul_scalar,
        "matmul" => case_matmul,
        "transpose" => case_transpose,
        "concat_cols" => case_concat_cols,
        "concat_rows" => case_concat_rows,
        "slice_rows" => case_slice_rows,
        "row" => case_row,
        "row_softmax" => case_row_softmax,
        "mean_rows" => case_mean_rows,
        "std_rows" => case_std_rows,
        "sum" => case_sum,
        "row_norms" => case_row_norms,
        "norm" => case_norm,
        "sqrt" => case_sqrt,
        "exp" => case_exp,
        "log" => case_log,
        "tanh" => case_tanh,
        "sigmoid" => case_sigmoid,
        "abs" => case_abs,
        "hinge" => case_hinge,
        "scale" => case_scale,
        "add_scalar" => case_add_scalar,
        "max_axis" => case_max_axis,
        "pick" => case_pick,
        "cosine_matrix" => case_cosine_matrix,
        "column_softmax" => case_column_softmax,
        "bidirectional_attention" => case_attention,
        "multi_head_attention" => case_multi_head_attention,
        "gru" => case_gru,
        "bigru" => case_bigru,
        "sequence_encoder" => case_sequence_encoder,
        "fusion" => case_fusion,
        "median_bandwidth" => case_median_bandwidth,
        "mmd" => case_mmd,
        "L_SL" => case_supervised,
        "L_DV" => case_domain_video,
        "L_DQ" => case_domain_query,
        "L_M1" => case_consistency,
        "L_M2" => case_distribution,
        "L_SA" => case_specific,
        "L_final" => case_final,
    ]
}

fn instance_rng(seed: u64, case: usize, instance: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((case as u64) << 32) | instance as u64);
    rng
}

/// Runs one instance of a case.
pub fn check_instance(
    case: &Case,
    seed: u64,
    case_index: usize,
    instance: usize,
    opts: &SuiteOptions,
) -> Result<GradCheckReport> {
    let inst = (case.make)(&mut instance_rng(seed, case_index, instance));
    let mut analytic = analytic_gradients(&inst.build, &inst.inputs)?;
    if opts.corrupt.as_deref() == Some(case.name) {
        for m in &mut analytic {
            for v in m.data_mut() {
                *v = *v * 1.01 + 1e-3;
            }
        }
    }
    grad_check_against(&inst.build, &inst.inputs, &analytic, opts.step)
}

pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let cases = cases();
    let jobs = cases.len() * opts.instances;
    let results = opts.exec.try_map(jobs, |j| {
        let (c, i) = (j / opts.instances, j % opts.instances);
        check_instance(&cases[c], opts.seed, c, i, opts)
    })?;
    let report = cases
        .iter()
        .enumerate()
        .map(|(c, case)| {
            let chunk = &results[c * opts.instances..(c + 1) * opts.instances];
            let worst_instance =
                chunk.iter().enumerate().fold(
                    0,
                    |w, (i, r)| if r.max_rel_error > chunk[w].max_rel_error { i } else { w },
                );
            let worst = &chunk[worst_instance];
            CaseResult {
                name: case.name,
                instances: opts.instances,
                entries: chunk.iter().map(|r| r.entries_checked).sum(),
                max_rel_error: worst.max_rel_error,
                worst_instance,
                analytic: worst.analytic,
                numeric: worst.numeric,
            }
        })
        .collect();
    Ok(SuiteReport {
        seed: opts.seed,
        cases: report,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_builds_and_passes_a_few_instances() {
        let opts = SuiteOptions {
            instances: 3,
            ..SuiteOptions::default()
        };
        let r = run_suite(&opts).unwrap();
        assert!(r.passed(TOLERANCE), "{:?}", r.worst());
    }

    #[test]
    fn corruption_is_detected_and_named() {
        let opts = SuiteOptions {
            instances: 2,
            corrupt: Some("tanh".into()),
            ..SuiteOptions::default()
        };
        let r = run_suite(&opts).unwrap();
        assert!(!r.passed(TOLERANCE));
        assert_eq!(r.worst().name, "tanh");
    }
}
