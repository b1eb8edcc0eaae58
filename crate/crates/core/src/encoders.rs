//! Sequence encoders: multi-head self-attention, bidirectional GRU and the
//! video/query encoder stacks built from them.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// An `L x d` sequence of feature vectors (video frames or query words).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence(Matrix);

impl FeatureSequence {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Empty("feature sequence"));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("feature sequence".into()));
        }
        Ok(FeatureSequence(values))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_values(self) -> Matrix {
        self.0
    }
}

/// Which sub-module runs first inside an encoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderOrder {
    AttentionFirst,
    RecurrentFirst,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: store.add_uniform(format!("{name}.weight"), input, output, input, rng),
            bias: store.add_uniform(format!("{name}.bias"), 1, output, input, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let xw = g.matmul(x, b.var(self.weight))?;
        g.add_row(xw, b.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Scaled dot-product self-attention with per-head projections and a
/// residual connection, so frames keep their own content while attending.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: Vec<AttentionHead>,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide attention dimension {dim}"
            )));
        }
        let head_dim = dim / heads;
        let heads = (0..heads)
            .map(|h| AttentionHead {
                query: store.add_uniform(format!("{name}.head{h}.query"), dim, head_dim, dim, rng),
                key: store.add_uniform(format!("{name}.head{h}.key"), dim, head_dim, dim, rng),
                value: store.add_uniform(format!("{name}.head{h}.value"), dim, head_dim, dim, rng),
            })
            .collect();
        Ok(MultiHeadAttention {
            dim,
            heads,
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim),
        })
    }

    /// Returns the attended sequence and the per-head attention weights.
    pub fn forward_with_weights(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let (_, cols) = g.shape(x);
        if cols != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: cols,
            });
        }
        let head_dim = self.dim / self.heads.len();
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = g.matmul(x, b.var(head.query))?;
            let k = g.matmul(x, b.var(head.key))?;
            let v = g.matmul(x, b.var(head.value))?;
            let kt = g.transpose(k);
            let logits = g.matmul(q, kt)?;
            let logits = g.scale(logits, inv_sqrt);
            let attn = g.row_softmax(logits);
            outputs.push(g.matmul(attn, v)?);
            weights.push(attn);
        }
        let joined = g.concat_cols(&outputs)?;
        let mixed = self.output.forward(g, b, joined)?;
        Ok((g.add(x, mixed)?, weights))
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, b, x)?.0)
    }
}

/// One GRU direction.
///
/// `z = sigmoid(x Wz + h Uz + bz)`, `r = sigmoid(x Wr + h Ur + br)`,
/// `n = tanh(x Wn + (r * h) Un + bn)`, `h' = (1 - z) * n + z * h`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    pub w_update: ParamId,
    pub w_reset: ParamId,
    pub w_candidate: ParamId,
    pub u_update: ParamId,
    pub u_reset: ParamId,
    pub u_candidate: ParamId,
    pub b_update: ParamId,
    pub b_reset: ParamId,
    pub b_candidate: ParamId,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        let mut w = |gate: &str, rows: usize, cols: usize, store: &mut ParamStore| {
            store.add_uniform(format!("{name}.{gate}"), rows, cols, hidden, rng)
        };
        GruCell {
            input,
            hidden,
            w_update: w("w_update", input, hidden, store),
            w_reset: w("w_reset", input, hidden, store),
            w_candidate: w("w_candidate", input, hidden, store),
            u_update: w("u_update", hidden, hidden, store),
            u_reset: w("u_reset", hidden, hidden, store),
            u_candidate: w("u_candidate", hidden, hidden, store),
            b_update: w("b_update", 1, hidden, store),
            b_reset: w("b_reset", 1, hidden, store),
            b_candidate: w("b_candidate", 1, hidden, store),
        }
    }

    /// Runs the recurrence over the rows of `x`, front to back or back to
    /// front. Hidden states are returned in position order either way.
    pub fn run(&self, g: &mut Graph, b: &Bound, x: Var, reverse: bool) -> Result<Var> {
        let (steps, _) = g.shape(x);
        let xz = g.matmul(x, b.var(self.w_update))?;
        let xz = g.add_row(xz, b.var(self.b_update))?;
        let xr = g.matmul(x, b.var(self.w_reset))?;
        let xr = g.add_row(xr, b.var(self.b_reset))?;
        let xn = g.matmul(x, b.var(self.w_candidate))?;
        let xn = g.add_row(xn, b.var(self.b_candidate))?;

        let mut h = g.leaf(Matrix::zeros(1, self.hidden));
        let mut states = vec![h; steps];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..steps).rev())
        } else {
            Box::new(0..steps)
        };
        for t in order {
            let zt = g.row(xz, t)?;
            let rt = g.row(xr, t)?;
            let nt = g.row(xn, t)?;
            let hu = g.matmul(h, b.var(self.u_update))?;
            let z = g.add(zt, hu)?;
            let z = g.sigmoid(z);
            let hr = g.matmul(h, b.var(self.u_reset))?;
            let r = g.add(rt, hr)?;
            let r = g.sigmoid(r);
            let rh = g.mul(r, h)?;
            let rhu = g.matmul(rh, b.var(self.u_candidate))?;
            let n = g.add(nt, rhu)?;
            let n = g.tanh(n);
            let diff = g.sub(h, n)?;
            let gated = g.mul(z, diff)?;
            h = g.add(n, gated)?;
            states[t] = h;
        }
        g.concat_rows(&states)
    }
}

/// Forward and backward GRUs, outputs concatenated per position (`2 x hidden`).
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        BiGru {
            forward: GruCell::new(store, rng, &format!("{name}.fwd"), input, hidden),
            backward: GruCell::new(store, rng, &format!("{name}.bwd"), input, hidden),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.forward.input {
            return Err(Error::DimensionMismatch {
                expected: self.forward.input,
                actual: cols,
            });
        }
        let fwd = self.forward.run(g, b, x, false)?;
        let bwd = self.backward.run(g, b, x, true)?;
        g.concat_cols(&[fwd, bwd])
    }
}

/// Bi-GRU followed by a linear map from `2 x hidden` back to the model dimension.
#[derive(Clone, Debug)]
pub struct RecurrentBlock {
    pub gru: BiGru,
    pub projection: Linear,
}

impl RecurrentBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        let gru = BiGru::new(store, rng, &format!("{name}.bigru"), input, hidden);
        let projection = Linear::new(store, rng, &format!("{name}.proj"), 2 * hidden, output);
        RecurrentBlock { gru, projection }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h = self.gru.forward(g, b, x)?;
        self.projection.forward(g, b, h)
    }
}

/// Self-attention plus recurrent block, in a configurable order.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    pub order: EncoderOrder,
    pub input_dim: usize,
    pub attention: MultiHeadAttention,
    pub recurrent: RecurrentBlock,
}

impl SequenceEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        order: EncoderOrder,
        input_dim: usize,
        dim: usize,
        hidden: usize,
        heads: usize,
    ) -> Result<Self> {
        // Attention works at whatever width it sees: the raw input width when
        // it runs first, the model width otherwise.
        let attention_dim = match order {
            EncoderOrder::AttentionFirst => input_dim,
            EncoderOrder::RecurrentFirst => dim,
        };
        let attention = MultiHeadAttention::new(store, rng, &format!("{name}.attn"), attention_dim, heads)?;
        let recurrent = RecurrentBlock::new(store, rng, &format!("{name}.rnn"), input_dim, hidden, dim);
        Ok(SequenceEncoder {
            order,
            input_dim,
            attention,
            recurrent,
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: cols,
            });
        }
        match self.order {
            EncoderOrder::AttentionFirst => {
                let a = self.attention.forward(g, b, x)?;
                self.recurrent.forward(g, b, a)
            }
            EncoderOrder::RecurrentFirst => {
                let r = self.recurrent.forward(g, b, x)?;
                self.attention.forward(g, b, r)
            }
        }
    }
}

/// Token embedding table followed by a [`SequenceEncoder`].
#[derive(Clone, Debug)]
pub struct QueryEncoder {
    pub vocab: usize,
    pub embedding: ParamId,
    pub encoder: SequenceEncoder,
}

impl QueryEncoder {
    pub fn embed(&self, g: &mut Graph, b: &Bound, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Empty("query tokens"));
        }
        let table = b.var(self.embedding);
        let rows = tokens
            .iter()
            .map(|&id| {
                if id >= self.vocab {
                    return Err(Error::OutOfVocabulary { id, vocab: self.vocab });
                }
                g.row(table, id)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, tokens: &[usize]) -> Result<Var> {
        let e = self.embed(g, b, tokens)?;
        self.encoder.forward(g, b, e)
    }
}
