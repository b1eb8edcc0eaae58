//! Frame-word cosine similarity, bidirectional attention and fused frame
//! features.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Matrix, Var};
use crate::encoders::{FeatureSequence, RecurrentBlock};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

/// Signed cosine, or its absolute value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineMode {
    #[default]
    Signed,
    Absolute,
}

/// Pairwise cosine similarity between the rows of `a` (`n x d`) and `b`
/// (`m x d`), as an `n x m` node. Pairs involving a zero row score 0.
pub fn cosine_matrix(g: &mut Graph, a: Var, b: Var, mode: CosineMode) -> Result<Var> {
    let (ar, ac) = g.shape(a);
    let (br, bc) = g.shape(b);
    if ac != bc {
        return Err(Error::ShapeMismatch {
            op: "cosine_matrix",
            left: (ar, ac),
            right: (br, bc),
        });
    }
    let bt = g.transpose(b);
    let dots = g.matmul(a, bt)?;
    let na = g.row_norms(a);
    let nb = g.row_norms(b);
    let nbt = g.transpose(nb);
    let denom = g.matmul(na, nbt)?;
    let cos = g.safe_div(dots, denom)?;
    Ok(match mode {
        CosineMode::Signed => cos,
        CosineMode::Absolute => g.abs(cos),
    })
}

/// Softmax down each column.
pub fn column_softmax(g: &mut Graph, a: Var) -> Var {
    let t = g.transpose(a);
    let s = g.row_softmax(t);
    g.transpose(s)
}

/// Frame-word similarities together with their row- and column-wise softmax
/// normalisations.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Matrix,
    pub row_normalized: Matrix,
    pub col_normalized: Matrix,
}

pub fn similarity_matrix(
    video: &FeatureSequence,
    query: &FeatureSequence,
    mode: CosineMode,
) -> Result<SimilarityMatrix> {
    if video.dim() != query.dim() {
        return Err(Error::DimensionMismatch {
            expected: video.dim(),
            actual: query.dim(),
        });
    }
    let mut g = Graph::new();
    let v = g.leaf(video.values().clone());
    let q = g.leaf(query.values().clone());
    let c = cosine_matrix(&mut g, v, q, mode)?;
    let r = g.row_softmax(c);
    let col = column_softmax(&mut g, c);
    Ok(SimilarityMatrix {
        values: g.value(c).clone(),
        row_normalized: g.value(r).clone(),
        col_normalized: g.value(col).clone(),
    })
}

/// Video-to-query (`X = C_r Q`) and query-to-video (`Y = C_r C_c^T V`)
/// attended sequences, both `T x d`.
pub fn attend(g: &mut Graph, video: Var, query: Var, similarity: Var) -> Result<(Var, Var)> {
    let (t, d) = g.shape(video);
    let (n, qd) = g.shape(query);
    let (st, sn) = g.shape(similarity);
    if d != qd || st != t || sn != n {
        return Err(Error::ShapeMismatch {
            op: "bidirectional_attention",
            left: (st, sn),
            right: (t, n),
        });
    }
    let rows = g.row_softmax(similarity);
    let cols = column_softmax(g, similarity);
    let x = g.matmul(rows, query)?;
    let cols_t = g.transpose(cols);
    let frame_affinity = g.matmul(rows, cols_t)?;
    let y = g.matmul(frame_affinity, video)?;
    Ok((x, y))
}

/// Value-level bidirectional attention given a precomputed similarity matrix.
pub fn bidirectional_attention(
    video: &FeatureSequence,
    query: &FeatureSequence,
    similarity: &SimilarityMatrix,
) -> Result<(FeatureSequence, FeatureSequence)> {
    let mut g = Graph::new();
    let v = g.leaf(video.values().clone());
    let q = g.leaf(query.values().clone());
    let c = g.leaf(similarity.values.clone());
    let (x, y) = attend(&mut g, v, q, c)?;
    Ok((
        FeatureSequence::new(g.value(x).clone())?,
        FeatureSequence::new(g.value(y).clone())?,
    ))
}

/// Bi-GRU over `[V; X; V*X; V*Y]`, with its own weights.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub dim: usize,
    pub block: RecurrentBlock,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Self {
        Fusion {
            dim,
            block: RecurrentBlock::new(store, rng, "fusion", 4 * dim, hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, video: Var, x: Var, y: Var) -> Result<Var> {
        let shape = g.shape(video);
        for other in [x, y] {
            if g.shape(other) != shape {
                return Err(Error::ShapeMismatch {
                    op: "fuse_features",
                    left: shape,
                    right: g.shape(other),
                });
            }
        }
        if shape.1 != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: shape.1,
            });
        }
        let vx = g.mul(video, x)?;
        let vy = g.mul(video, y)?;
        let joined = g.concat_cols(&[video, x, vx, vy])?;
        self.block.forward(g, b, joined)
    }

    /// Full cross-modal path from encoded video and query to fused frames.
    pub fn fuse_encoded(&self, g: &mut Graph, b: &Bound, video: Var, query: Var, mode: CosineMode) -> Result<Var> {
        let c = cosine_matrix(g, video, query, mode)?;
        let (x, y) = attend(g, video, query, c)?;
        self.forward(g, b, video, x, y)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::diff::{grad_check, sigmoid};

    fn seq(rows: &[&[f64]]) -> FeatureSequence {
        FeatureSequence::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_hand_cases() {
        let c = similarity_matrix(&seq(&[&[1.0, 0.0]]), &seq(&[&[0.0, 1.0]]), CosineMode::Signed).unwrap();
        assert_eq!(c.values.item(), 0.0);
        let c = similarity_matrix(&seq(&[&[1.0, 1.0]]), &seq(&[&[1.0, 1.0]]), CosineMode::Signed).unwrap();
        assert!((c.values.item() - 1.0).abs() < 1e-15);
        let c = similarity_matrix(&seq(&[&[3.0, 4.0]]), &seq(&[&[4.0, 3.0]]), CosineMode::Signed).unwrap();
        assert!((c.values.item() - 24.0 / 25.0).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_scores_zero_with_zero_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::from_rows(&[[0.0, 0.0]]).unwrap());
        let b = g.leaf(Matrix::from_rows(&[[1.0, 2.0]]).unwrap());
        let c = cosine_matrix(&mut g, a, b, CosineMode::Signed).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(a).data().iter().chain(grads.wrt(b).data()).all(|&v| v == 0.0));
    }

    #[test]
    fn absolute_mode_is_non_negative() {
        let c = similarity_matrix(&seq(&[&[1.0, 0.0]]), &seq(&[&[-1.0, 0.2]]), CosineMode::Absolute).unwrap();
        assert!(c.values.item() > 0.0);
        let s = similarity_matrix(&seq(&[&[1.0, 0.0]]), &seq(&[&[-1.0, 0.2]]), CosineMode::Signed).unwrap();
        assert_eq!(c.values.item(), -s.values.item());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        assert!(similarity_matrix(&seq(&[&[1.0, 0.0]]), &seq(&[&[1.0, 0.0, 0.0]]), CosineMode::Signed).is_err());
    }

    #[test]
    fn single_word_query_is_repeated() {
        let v = seq(&[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 0.0]]);
        let q = seq(&[&[0.25, 0.75]]);
        let c = similarity_matrix(&v, &q, CosineMode::Signed).unwrap();
        let (x, _) = bidirectional_attention(&v, &q, &c).unwrap();
        for r in 0..3 {
            assert_eq!(x.values().row(r), &[0.25, 0.75]);
        }
    }

    #[test]
    fn one_by_one_attention_returns_video() {
        let v = seq(&[&[1.5, -2.0]]);
        let q = seq(&[&[0.3, 0.1]]);
        let c = similarity_matrix(&v, &q, CosineMode::Signed).unwrap();
        let (_, y) = bidirectional_attention(&v, &q, &c).unwrap();
        assert_eq!(y.values(), v.values());
    }

    #[test]
    fn two_by_two_hand_products() {
        let v = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = seq(&[&[1.0, 0.0], &[1.0, 1.0]]);
        // C = [[1, 1/sqrt2], [0, 1/sqrt2]]
        let h = 1.0 / 2f64.sqrt();
        let sm = |a: f64, b: f64| (a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp()));
        let (r00, r01) = sm(1.0, h);
        let (r10, r11) = sm(0.0, h);
        let (c00, c10) = sm(1.0, 0.0);
        let (c01, c11) = sm(h, h);
        let x = [r00 + r01, r01, r10 + r11, r11];
        // Y = C_r C_c^T V, V = I
        let a = [
            r00 * c00 + r01 * c01,
            r00 * c10 + r01 * c11,
            r10 * c00 + r11 * c01,
            r10 * c10 + r11 * c11,
        ];

        let c = similarity_matrix(&v, &q, CosineMode::Signed).unwrap();
        assert!((c.values.get(0, 1) - h).abs() < 1e-15);
        let (xs, ys) = bidirectional_attention(&v, &q, &c).unwrap();
        for (o, e) in xs.values().data().iter().zip(x) {
            assert!((o - e).abs() < 1e-15);
        }
        for (o, e) in ys.values().data().iter().zip(a) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn fusion_matches_hand_stepped_recurrence() {
        // d = 1 so the fused input is [v, x, v*x, v*y] = [1, 1, 1, 1]. Every
        // GRU weight is a constant so each direction has a closed-form trace.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fusion = Fusion::new(&mut store, &mut rng, 1, 1);
        let cells = [&fusion.block.gru.forward, &fusion.block.gru.backward];
        for cell in cells {
            for (id, v) in [
                (cell.w_update, 0.1),
                (cell.w_reset, -0.2),
                (cell.w_candidate, 0.3),
                (cell.u_update, 0.5),
                (cell.u_reset, 0.5),
                (cell.u_candidate, -0.5),
                (cell.b_update, 0.0),
                (cell.b_reset, 0.0),
                (cell.b_candidate, 0.0),
            ] {
                let (r, c) = store.get(id).shape();
                *store.get_mut(id) = Matrix::filled(r, c, v);
            }
        }
        *store.get_mut(fusion.block.projection.weight) = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        *store.get_mut(fusion.block.projection.bias) = Matrix::scalar(0.5);

        // Input row sums: w_update 0.4, w_reset -0.8, w_candidate 1.2.
        let mut h = 0.0f64;
        let mut trace = vec![];
        for _ in 0..2 {
            let z = sigmoid(0.4 + 0.5 * h);
            let r = sigmoid(-0.8 + 0.5 * h);
            let n = (1.2 - 0.5 * r * h).tanh();
            h = (1.0 - z) * n + z * h;
            trace.push(h);
        }
        // Identical inputs: the backward state at position t equals the
        // forward state after (T - t) steps.
        let expected = [trace[0] + 2.0 * trace[1] + 0.5, trace[1] + 2.0 * trace[0] + 0.5];

        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let ones = g.leaf(Matrix::filled(2, 1, 1.0));
        let out = fusion.forward(&mut g, &b, ones, ones, ones).unwrap();
        assert_eq!(g.shape(out), (2, 1));
        for (o, e) in g.value(out).data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-15, "{o} vs {e}");
        }
    }

    #[test]
    fn fusion_shape_contract() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fusion = Fusion::new(&mut store, &mut rng, 4, 3);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let v = g.leaf(random(5, 4, &mut rng));
        let q = g.leaf(random(3, 4, &mut rng));
        let out = fusion.fuse_encoded(&mut g, &b, v, q, CosineMode::Signed).unwrap();
        assert_eq!(g.shape(out), (5, 4));

        let bad = g.leaf(random(4, 4, &mut rng));
        assert!(fusion.forward(&mut g, &b, v, bad, v).is_err());
    }

    #[test]
    fn fuse_path_gradient_check() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fusion = Fusion::new(&mut store, &mut rng, 3, 2);
        let mut inputs: Vec<Matrix> = store.iter().map(|(_, m)| m.clone()).collect();
        let n = inputs.len();
        inputs.push(random(4, 3, &mut rng));
        inputs.push(random(2, 3, &mut rng));
        let report = grad_check(
            |g, vars| {
                let b = Bound::from_vars(vars[..n].to_vec());
                let out = fusion.fuse_encoded(g, &b, vars[n], vars[n + 1], CosineMode::Signed)?;
                let s = g.sum(out);
                Ok(g.scale(s, 0.1))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
