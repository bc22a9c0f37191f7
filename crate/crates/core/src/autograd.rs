//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value on the tape is a 2-D matrix; scalars are `1 × 1`. A training
//! step builds a fresh [`Tape`], binds parameters as leaves, runs the forward
//! pass through the op methods, and calls [`Tape::backward`] on the scalar
//! loss. Nodes created from [`Tape::constant`] or [`Tape::detach`] never
//! receive gradients, which is how stop-gradient is expressed.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::sparse::CsrMatrix;

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Gelu(Var),
    Softplus(Var),
    SumAll(Var),
    SumCols(Var),
    RowNormalize(Var),
    LayerNorm(Var, f64),
    LogSoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    GroupMeanRows(Var, usize),
    SparseMatMul(Arc<CsrMatrix>, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    StraightThrough(Var),
    Diagonal(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_norm(row: ndarray::ArrayView1<f64>) -> f64 {
    row.dot(&row).sqrt()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + row` where `row` is `1 × cols`, broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1);
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1);
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// `a [g·n × d] + tile(b [n × d])`: adds `b` to each consecutive block of
    /// `n` rows.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let (n, bc) = self.shape(b);
        assert_eq!(cols, bc);
        assert!(n > 0 && rows % n == 0, "add_tiled: rows not a multiple");
        let mut value = self.value(a).clone();
        let tile = self.value(b);
        for (r, mut row) in value.axis_iter_mut(Axis(0)).enumerate() {
            row += &tile.row(r % n);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::AddTiled(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let count = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / count)
    }

    /// Sums each row: `m × n → m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Scales every row to unit L2 norm. All-zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let norm = row_norm(row.view());
            if norm > 0.0 {
                row /= norm;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::RowNormalize(a), rg)
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm(a, eps), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let value = src.select(Axis(0), rows);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, rows.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: element count");
        let data: Vec<f64> = src.iter().cloned().collect();
        let value = Array2::from_shape_vec((rows, cols), data).unwrap();
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Averages consecutive blocks of `group` rows: `g·group × d → g × d`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(group > 0 && rows % group == 0);
        let src = self.value(a);
        let mut value = Array2::zeros((rows / group, cols));
        for (r, row) in src.axis_iter(Axis(0)).enumerate() {
            let mut out = value.row_mut(r / group);
            out.scaled_add(1.0 / group as f64, &row);
        }
        let rg = self.rg(a);
        self.push(value, Op::GroupMeanRows(a, group), rg)
    }

    /// `m · a` for a constant sparse `m`.
    pub fn sparse_matmul(&mut self, m: Arc<CsrMatrix>, a: Var) -> Var {
        let value = m.mul_dense(self.value(a).view());
        let rg = self.rg(a);
        self.push(value, Op::SparseMatMul(m, a), rg)
    }

    /// Scaled dot-product self-attention computed independently inside each
    /// block of `group` consecutive rows, with `heads` column-split heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, group: usize, heads: usize) -> Var {
        let (rows, d) = self.shape(q);
        assert_eq!(self.shape(k), (rows, d));
        assert_eq!(self.shape(v), (rows, d));
        assert!(group > 0 && rows % group == 0, "attention: rows not a multiple of group");
        assert!(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let blocks = rows / group;
        let (qv, kv, vv) = (
            self.value(q).as_standard_layout(),
            self.value(k).as_standard_layout(),
            self.value(v).as_standard_layout(),
        );
        let (qs, ks, vs) = (qv.as_slice().unwrap(), kv.as_slice().unwrap(), vv.as_slice().unwrap());
        let mut out_data = vec![0.0; rows * d];
        let mut probs = vec![0.0; blocks * heads * group * group];
        for b in 0..blocks {
            let base = b * group;
            for h in 0..heads {
                let c0 = h * dk;
                let pbase = (b * heads + h) * group * group;
                for i in 0..group {
                    let qi = &qs[(base + i) * d + c0..][..dk];
                    let p = &mut probs[pbase + i * group..pbase + (i + 1) * group];
                    let mut max = f64::NEG_INFINITY;
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &ks[(base + j) * d + c0..][..dk];
                        *pj = dot(qi, kj) * scale;
                        max = max.max(*pj);
                    }
                    let mut total = 0.0;
                    for pj in p.iter_mut() {
                        *pj = (*pj - max).exp();
                        total += *pj;
                    }
                    for pj in p.iter_mut() {
                        *pj /= total;
                    }
                    let o = &mut out_data[(base + i) * d + c0..][..dk];
                    for (j, &pj) in p.iter().enumerate() {
                        axpy(pj, &vs[(base + j) * d + c0..][..dk], o);
                    }
                }
            }
        }
        let out = Array2::from_shape_vec((rows, d), out_data).unwrap();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Forward value is `quantized`; the backward pass routes the incoming
    /// gradient unchanged to `input` (identity Jacobian across the quantizer).
    pub fn straight_through(&mut self, input: Var, quantized: Mat) -> Var {
        assert_eq!(self.shape(input), quantized.dim());
        let rg = self.rg(input);
        self.push(quantized, Op::StraightThrough(input), rg)
    }

    /// Diagonal of a square matrix as an `m × 1` column.
    pub fn diagonal(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r, c);
        let value = self.value(a).diag().to_owned().insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(value, Op::Diagonal(a), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*row));
                }
                if self.rg(*row) {
                    let prod = g * self.value(*a);
                    self.accumulate(grads, *row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddTiled(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let (n, cols) = self.shape(*b);
                    let mut gb = Array2::zeros((n, cols));
                    for (r, row) in g.axis_iter(Axis(0)).enumerate() {
                        let mut out = gb.row_mut(r % n);
                        out += &row;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, factor) => self.accumulate(grads, *a, g * *factor),
            Op::Square(a) => self.accumulate(grads, *a, g * &(self.value(*a) * 2.0)),
            Op::Gelu(a) => {
                let mut ga = self.value(*a).mapv(gelu_grad);
                ga *= g;
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let mut ga = self.value(*a).mapv(sigmoid);
                ga *= g;
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Array2::zeros((r, c));
                for (i, mut row) in ga.axis_iter_mut(Axis(0)).enumerate() {
                    row.fill(g[[i, 0]]);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowNormalize(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut ga = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    let norm = row_norm(x.row(i));
                    if norm > 0.0 {
                        let yg = y.row(i).dot(&g.row(i));
                        let mut out = ga.row_mut(i);
                        Zip::from(&mut out)
                            .and(g.row(i))
                            .and(y.row(i))
                            .for_each(|o, &gi, &yi| *o = (gi - yi * yg) / norm);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut ga = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    let xr = x.row(i);
                    let n = xr.len() as f64;
                    let mean = xr.sum() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = g.row(i);
                    let yr = y.row(i);
                    let g_mean = gr.sum() / n;
                    let gy_mean = gr.dot(&yr) / n;
                    let mut out = ga.row_mut(i);
                    Zip::from(&mut out)
                        .and(&gr)
                        .and(&yr)
                        .for_each(|o, &gi, &yi| *o = inv * (gi - g_mean - yi * gy_mean));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Array2::zeros(y.dim());
                for i in 0..y.nrows() {
                    let gsum = g.row(i).sum();
                    let mut out = ga.row_mut(i);
                    Zip::from(&mut out)
                        .and(g.row(i))
                        .and(y.row(i))
                        .for_each(|o, &gi, &yi| *o = gi - yi.exp() * gsum);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, rows) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (r, &src) in rows.iter().enumerate() {
                    let mut out = ga.row_mut(src);
                    out += &g.row(r);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![offset..offset + rows, ..]).to_owned());
                    }
                    offset += rows;
                }
            }
            Op::Reshape(a) => {
                let data: Vec<f64> = g.iter().cloned().collect();
                let ga = Array2::from_shape_vec(self.shape(*a), data).unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::GroupMeanRows(a, group) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Array2::zeros((rows, cols));
                let w = 1.0 / *group as f64;
                for (r, mut row) in ga.axis_iter_mut(Axis(0)).enumerate() {
                    row.scaled_add(w, &g.row(r / group));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SparseMatMul(m, a) => {
                self.accumulate(grads, *a, m.t_mul_dense(g.view()));
            }
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *group, *heads, probs, g, grads),
            Op::StraightThrough(a) => self.accumulate(grads, *a, g.clone()),
            Op::Diagonal(a) => {
                let n = self.shape(*a).0;
                let mut ga = Array2::zeros((n, n));
                for i in 0..n {
                    ga[[i, i]] = g[[i, 0]];
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        probs: &[f64],
        g: &Mat,
        grads: &mut [Option<Mat>],
    ) {
        let (rows, d) = self.shape(q);
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).as_standard_layout(),
            self.value(k).as_standard_layout(),
            self.value(v).as_standard_layout(),
        );
        let (qs, ks, vs) = (qv.as_slice().unwrap(), kv.as_slice().unwrap(), vv.as_slice().unwrap());
        let gl = g.as_standard_layout();
        let gs = gl.as_slice().unwrap();
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut dp = vec![0.0; group];
        for b in 0..rows / group {
            let base = b * group;
            for h in 0..heads {
                let c0 = h * dk;
                let pbase = (b * heads + h) * group * group;
                for i in 0..group {
                    let p = &probs[pbase + i * group..pbase + (i + 1) * group];
                    let gi = &gs[(base + i) * d + c0..][..dk];
                    // dV_j += p_ij · dO_i ; dP_ij = dO_i · V_j
                    for j in 0..group {
                        let at = (base + j) * d + c0;
                        axpy(p[j], gi, &mut gv[at..at + dk]);
                        dp[j] = dot(gi, &vs[at..at + dk]);
                    }
                    let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qi_at = (base + i) * d + c0;
                    for j in 0..group {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let at = (base + j) * d + c0;
                        axpy(ds, &ks[at..at + dk], &mut gq[qi_at..qi_at + dk]);
                        axpy(ds, &qs[qi_at..qi_at + dk], &mut gk[at..at + dk]);
                    }
                }
            }
        }
        let gq = Array2::from_shape_vec((rows, d), gq).unwrap();
        let gk = Array2::from_shape_vec((rows, d), gk).unwrap();
        let gv = Array2::from_shape_vec((rows, d), gv).unwrap();
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
