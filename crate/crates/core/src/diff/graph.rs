//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Every forward op appends a node holding its value and the recipe needed to
//! push gradients back to its inputs. Nodes are only ever appended, so the
//! tape order is already a topological order and the reverse pass is a single
//! backwards sweep.

use crate::diff::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis argument for [`Graph::max_axis`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, producing `1 x cols`.
    Rows,
    /// Reduce over columns, producing `rows x 1`.
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    SafeDiv(Var, Var),
    AddRow(Var, Var),
    MulScalarVar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    RowSoftmax(Var),
    MeanRows(Var),
    StdRows(Var),
    Sum(Var),
    RowNorms(Var),
    Norm(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Hinge(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MaxAxis(Var, Axis, Vec<usize>),
    Pick(Var, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::SafeDiv(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulScalarVar(..) => "mul_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::RowSoftmax(..) => "row_softmax",
            Op::MeanRows(..) => "mean_rows",
            Op::StdRows(..) => "std_rows",
            Op::Sum(..) => "sum",
            Op::RowNorms(..) => "row_norms",
            Op::Norm(..) => "norm",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::Hinge(..) => "hinge",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MaxAxis(..) => "max_axis",
            Op::Pick(..) => "pick",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; zeros when `v` does not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.leaf(Matrix::scalar(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let out = va.zip_map(vb, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let out = va.zip_map(vb, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let out = va.zip_map(vb, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise `a / b`, defined as 0 (with zero gradient) wherever `b == 0`.
    pub fn safe_div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("div", va, vb)?;
        let out = va.zip_map(vb, |x, y| if y == 0.0 { 0.0 } else { x / y });
        Ok(self.push(out, Op::SafeDiv(a, b)))
    }

    /// Adds the `1 x c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: va.shape(),
                right: vr.shape(),
            });
        }
        let mut out = va.clone();
        let c = va.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vr.data()[i % c];
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every entry of `a` by the 1x1 node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar",
                left: self.value(a).shape(),
                right: vs.shape(),
            });
        }
        let k = vs.item();
        let out = self.value(a).scale(k);
        Ok(self.push(out, Op::MulScalarVar(a, s)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_cols"));
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(first).shape(),
                    right: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_rows"));
        };
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(first).shape(),
                    right: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if len == 0 || start + len > va.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: va.shape(),
                right: (start, len),
            });
        }
        let out = va.slice_rows(start, len);
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.slice_rows(a, r, 1)
    }

    /// Softmax along each row, computed with max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        let c = va.cols();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::RowSoftmax(a))
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rows() == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let out = Matrix::row_vector(&va.mean_rows());
        Ok(self.push(out, Op::MeanRows(a)))
    }

    /// Population standard deviation of each column, as a `1 x cols` row.
    pub fn std_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rows() == 0 {
            return Err(Error::Empty("std_rows"));
        }
        let mean = va.mean_rows();
        let n = va.rows() as f64;
        let mut var = vec![0.0; va.cols()];
        for r in 0..va.rows() {
            for ((acc, x), m) in var.iter_mut().zip(va.row(r)).zip(&mean) {
                *acc += (x - m) * (x - m);
            }
        }
        let out: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        let out = Matrix::row_vector(&out);
        Ok(self.push(out, Op::StdRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Euclidean norm of each row, as `rows x 1`.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let norms: Vec<f64> = (0..va.rows())
            .map(|r| va.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Matrix::from_vec(va.rows(), 1, norms).expect("row count");
        self.push(out, Op::RowNorms(a))
    }

    /// Frobenius (for vectors: Euclidean) norm as a 1x1 node.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).norm());
        self.push(out, Op::Norm(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if let Some(bad) = va.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::domain("sqrt", format!("negative input {bad}")));
        }
        let out = va.map(f64::sqrt);
        Ok(self.push(out, Op::Sqrt(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if let Some(bad) = va.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        let out = va.map(f64::ln);
        Ok(self.push(out, Op::Log(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    /// `max(0, x)` elementwise.
    pub fn hinge(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Hinge(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, Op::AddScalar(a))
    }

    /// Maximum along an axis; ties resolve to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let va = self.value(a);
        if va.rows() == 0 || va.cols() == 0 {
            return Err(Error::Empty("max_axis"));
        }
        let (out, idx) = match axis {
            Axis::Cols => {
                let mut vals = Vec::with_capacity(va.rows());
                let mut idx = Vec::with_capacity(va.rows());
                for r in 0..va.rows() {
                    let (j, m) = argmax(va.row(r));
                    vals.push(m);
                    idx.push(j);
                }
                (Matrix::from_vec(va.rows(), 1, vals)?, idx)
            }
            Axis::Rows => {
                let mut vals = Vec::with_capacity(va.cols());
                let mut idx = Vec::with_capacity(va.cols());
                for c in 0..va.cols() {
                    let col: Vec<f64> = (0..va.rows()).map(|r| va.get(r, c)).collect();
                    let (j, m) = argmax(&col);
                    vals.push(m);
                    idx.push(j);
                }
                (Matrix::from_vec(1, va.cols(), vals)?, idx)
            }
        };
        Ok(self.push(out, Op::MaxAxis(a, axis, idx)))
    }

    /// Entry `(r, c)` of `a` as a 1x1 node.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let va = self.value(a);
        if r >= va.rows() || c >= va.cols() {
            return Err(Error::ShapeMismatch {
                op: "pick",
                left: va.shape(),
                right: (r, c),
            });
        }
        let out = Matrix::scalar(va.get(r, c));
        Ok(self.push(out, Op::Pick(a, r, c)))
    }

    /// Reverse pass from the scalar `output`.
    ///
    /// May be called once per graph.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(output);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarOutput { rows, cols });
        }
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(vb, |g, b| g * b));
                accumulate(grads, *b, g.zip_map(va, |g, a| g * a));
            }
            Op::SafeDiv(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = g.zip_map(vb, |g, b| if b == 0.0 { 0.0 } else { g / b });
                let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                for (k, out) in gb.data_mut().iter_mut().enumerate() {
                    let b = vb.data()[k];
                    if b != 0.0 {
                        *out = -g.data()[k] * va.data()[k] / (b * b);
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, Matrix::row_vector(&column_sums(g)));
            }
            Op::MulScalarVar(a, s) => {
                let k = self.value(*s).item();
                let va = self.value(*a);
                let gs: f64 = g.data().iter().zip(va.data()).map(|(g, a)| g * a).sum();
                accumulate(grads, *a, g.scale(k));
                accumulate(grads, *s, Matrix::scalar(gs));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = g.matmul(&vb.transpose()).expect("matmul backward");
                let gb = va.transpose().matmul(g).expect("matmul backward");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    let mut gp = Matrix::zeros(pr, pc);
                    for r in 0..pr {
                        for c in 0..pc {
                            gp.set(r, c, g.get(r, offset + c));
                        }
                    }
                    offset += pc;
                    accumulate(grads, p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, _) = self.shape(p);
                    accumulate(grads, p, g.slice_rows(offset, pr));
                    offset += pr;
                }
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                let c = va.cols();
                ga.data_mut()[start * c..start * c + g.data().len()].copy_from_slice(g.data());
                accumulate(grads, *a, ga);
            }
            Op::RowSoftmax(a) => {
                let c = y.cols();
                let mut ga = Matrix::zeros(y.rows(), c);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        ga.set(r, j, yr[j] * (gr[j] - dot));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let (n, c) = self.shape(*a);
                let mut ga = Matrix::zeros(n, c);
                for r in 0..n {
                    for j in 0..c {
                        ga.set(r, j, g.get(0, j) / n as f64);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::StdRows(a) => {
                let va = self.value(*a);
                let (n, c) = va.shape();
                let mean = va.mean_rows();
                let mut ga = Matrix::zeros(n, c);
                for j in 0..c {
                    let s = y.get(0, j);
                    if s == 0.0 {
                        continue;
                    }
                    for r in 0..n {
                        ga.set(r, j, g.get(0, j) * (va.get(r, j) - mean[j]) / (n as f64 * s));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::RowNorms(a) => {
                let va = self.value(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let n = y.get(r, 0);
                    if n == 0.0 {
                        continue;
                    }
                    for j in 0..va.cols() {
                        ga.set(r, j, g.get(r, 0) * va.get(r, j) / n);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Norm(a) => {
                let n = y.item();
                let va = self.value(*a);
                let ga = if n == 0.0 {
                    Matrix::zeros(va.rows(), va.cols())
                } else {
                    va.scale(g.item() / n)
                };
                accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                accumulate(
                    grads,
                    *a,
                    g.zip_map(y, |g, s| if s == 0.0 { 0.0 } else { g / (2.0 * s) }),
                );
            }
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(y, |g, e| g * e)),
            Op::Log(a) => accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| g / x)),
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Abs(a) => accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| g * sign(x))),
            Op::Hinge(a) => accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::Scale(a, k) => accumulate(grads, *a, g.scale(*k)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MaxAxis(a, axis, idx) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                match axis {
                    Axis::Cols => {
                        for (row, &j) in idx.iter().enumerate() {
                            ga.set(row, j, g.get(row, 0));
                        }
                    }
                    Axis::Rows => {
                        for (col, &i) in idx.iter().enumerate() {
                            ga.set(i, col, g.get(0, col));
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Pick(a, r, c) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Matrix::zeros(rows, cols);
                ga.set(*r, *c, g.item());
                accumulate(grads, *a, ga);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// First index of the maximum value.
pub(crate) fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::row_vector(&[0.0, 0.0]));
        let s = g.row_softmax(x);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_norm_of_three_four() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::row_vector(&[3.0, 4.0]));
        let n = g.l2_norm(x);
        assert_eq!(g.value(n).item(), 5.0);
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::new();
        let a = Matrix::from_vec(3, 2, vec![1.0, -2.0, 0.5, 4.0, 3.0, 9.0]).unwrap();
        let i = g.leaf(Matrix::identity(3));
        let av = g.leaf(a.clone());
        let p = g.matmul(i, av).unwrap();
        assert_eq!(g.value(p), &a);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);
    }

    #[test]
    fn tanh_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::scalar(0.0));
        let y = g.tanh(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 1.0);
    }

    #[test]
    fn log_softmax_mean_at_uniform_input_has_zero_gradient() {
        // d/dx_j of (1/n) sum_i log softmax_i(x) = 1/n - softmax_j = 0 at uniform x.
        let mut g = Graph::new();
        let x = g.leaf(Matrix::row_vector(&[0.7, 0.7, 0.7, 0.7]));
        let s = g.row_softmax(x);
        let l = g.log(s).unwrap();
        let t = g.transpose(l);
        let m = g.mean_rows(t).unwrap();
        let grads = g.backward(m).unwrap();
        for v in grads.wrt(x).data() {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::row_vector(&[1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(Error::NonScalarOutput { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::scalar(2.0));
        let y = g.exp(x);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::BackwardAlreadyRun)));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::zeros(2, 3));
        let b = g.leaf(Matrix::zeros(3, 2));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(3, 2)"), "{msg}");
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::row_vector(&[1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn independent_input_gets_exact_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::row_vector(&[1.0, 2.0]));
        let unused = g.leaf(Matrix::row_vector(&[5.0, 6.0]));
        let _ = g.exp(unused);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn norm_of_zero_vector_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::zeros(1, 3));
        let n = g.l2_norm(x);
        let grads = g.backward(n).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0; 3]);
    }

    #[test]
    fn max_axis_ties_pick_lowest_index() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::row_vector(&[1.0, 3.0, 3.0]));
        let m = g.max_axis(x, Axis::Cols).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn std_rows_population() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::from_rows(&[[0.0, 0.0], [2.0, 2.0]]).unwrap());
        let s = g.std_rows(x).unwrap();
        assert!(close(g.value(s).get(0, 0), 1.0, 1e-15));
    }
}
