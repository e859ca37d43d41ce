//! Dense `f64` matrices and a reverse-mode tape over them.
//!
//! The tape records every operation of one forward pass; `backward` walks it
//! in reverse. Nodes whose inputs are all constants are skipped during the
//! backward pass.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn row_vector(v: Vec<f64>) -> Self {
        Self::new(1, v.len(), v)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1×1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(n, m, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_bt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_bt inner dims");
        let (n, m) = (self.rows, other.rows);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out.push(a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum());
            }
        }
        Matrix::new(n, m, out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_at(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_at inner dims");
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let brow = other.row(p);
            for i in 0..n {
                let a = self.data[p * n + i];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(n, m, out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.get(r, c));
            }
        }
        Matrix::new(self.cols, self.rows, out)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRow(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanRows {
        x: Var,
        rows: Vec<usize>,
    },
    Cosine(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
    },
    LogSumExp(Var),
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients(Vec<Option<Matrix>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
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

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        self.push(value, Op::MatMulBt(a, b), &[a, b])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Matrix::new(
            x.rows,
            x.cols,
            x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p + q);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p - q);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p * q);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddConst(a), &[a])
    }

    /// Adds a `1×m` row to every row of an `n×m` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows, 1, "add_row expects a row vector");
        assert_eq!(xv.cols, rv.cols, "add_row width");
        let mut value = xv.clone();
        for r in 0..value.rows {
            value.row_mut(r).iter_mut().zip(&rv.data).for_each(|(a, b)| *a += b);
        }
        self.push(value, Op::AddRow(x, row), &[x, row])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1×d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut value = xhat.clone();
        for r in 0..n {
            for c in 0..d {
                value.data[r * d + c] = value.data[r * d + c] * g.data[c] + b.data[c];
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Row-wise softmax. With `causal`, entry `(r, c)` for `c > r` is masked to 0.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        let mut value = Matrix::zeros(n, m);
        for r in 0..n {
            let allowed = if causal { (r + 1).min(m) } else { m };
            let probs = softmax(&xv.row(r)[..allowed]);
            value.row_mut(r)[..allowed].copy_from_slice(&probs);
        }
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Matrix::new(ids.len(), t.cols, data);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.rows * len);
        for r in 0..xv.rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Matrix::new(xv.rows, len, data);
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat_cols rows");
                value.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Mean of the listed rows as a `1×d` matrix.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        assert!(!rows.is_empty(), "mean over zero rows");
        let xv = self.value(x);
        let mut acc = vec![0.0; xv.cols];
        for &r in rows {
            acc.iter_mut().zip(xv.row(r)).for_each(|(a, b)| *a += b);
        }
        let k = rows.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        self.push(
            Matrix::row_vector(acc),
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Cosine similarity of two same-shape tensors as a scalar; 0 if either is zero.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.data.len(), y.data.len(), "cosine length");
        let value = cosine_value(&x.data, &y.data);
        self.push(Matrix::scalar(value), Op::Cosine(a, b), &[a, b])
    }

    /// Summed token negative log-likelihood; `None` targets are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per logits row");
        let mut probs = Matrix::zeros(lv.rows, lv.cols);
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let lp = log_softmax(lv.row(r));
            for (o, l) in probs.row_mut(r).iter_mut().zip(&lp) {
                *o = l.exp();
            }
            if let Some(t) = t {
                total -= lp[*t];
            }
        }
        self.push(
            Matrix::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `log Σ exp` over all entries, as a scalar.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let d = &self.value(x).data;
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v = max + d.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        self.push(Matrix::scalar(v), Op::LogSumExp(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data.iter().sum();
        self.push(Matrix::scalar(v), Op::Sum(x), &[x])
    }

    /// Sum of scalar nodes; a constant zero for an empty list.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Var {
        match xs.split_first() {
            None => self.constant(Matrix::scalar(0.0)),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &x| self.add(acc, x)),
        }
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).data.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_bt(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Matrix::new(g.rows, g.cols, d));
                }
                if self.wants(*b) {
                    let d = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Matrix::new(g.rows, g.cols, d));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*row) {
                    let mut acc = vec![0.0; g.cols];
                    for r in 0..g.rows {
                        acc.iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, *row, Matrix::row_vector(acc));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = g.data.iter().zip(&xv.data).map(|(gv, &v)| gv * gelu_grad(v)).collect();
                self.accumulate(grads, *x, Matrix::new(g.rows, g.cols, d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Matrix::new(g.rows, g.cols, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.shape();
                let gv = self.value(*gamma);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            dg[c] += g.get(r, c) * xhat.get(r, c);
                            db[c] += g.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gamma, Matrix::row_vector(dg));
                    self.accumulate(grads, *beta, Matrix::row_vector(db));
                }
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(n, d);
                    for r in 0..n {
                        let dxhat: Vec<f64> = (0..d).map(|c| g.get(r, c) * gv.data[c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat
                            .iter()
                            .zip(xhat.row(r))
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for c in 0..d {
                            dx.data[r * d + c] =
                                inv_std[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        dx.data[r * y.cols + c] = y.get(r, c) * (g.get(r, c) - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows, t.cols);
                for (r, &i) in ids.iter().enumerate() {
                    dt.row_mut(i).iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(g.rows * cols);
                        for r in 0..g.rows {
                            dp.extend_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.accumulate(grads, p, Matrix::new(g.rows, cols, dp));
                    }
                    off += cols;
                }
            }
            Op::MeanRows { x, rows } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows, xv.cols);
                let k = rows.len() as f64;
                for &r in rows {
                    dx.row_mut(r).iter_mut().zip(&g.data).for_each(|(a, b)| *a += b / k);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Cosine(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let gs = g.item();
                let nx = x.data.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.data.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nx == 0.0 || ny == 0.0 {
                    return;
                }
                let c = node.value.item();
                let grad_for = |u: &Matrix, v: &Matrix, nu: f64| {
                    let d = u
                        .data
                        .iter()
                        .zip(&v.data)
                        .map(|(&ui, &vi)| gs * (vi / (nx * ny) - c * ui / (nu * nu)))
                        .collect();
                    Matrix::new(u.rows, u.cols, d)
                };
                if self.wants(*a) {
                    self.accumulate(grads, *a, grad_for(x, y, nx));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, grad_for(y, x, ny));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gs = g.item();
                let mut dl = Matrix::zeros(probs.rows, probs.cols);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for c in 0..probs.cols {
                            dl.data[r * probs.cols + c] = gs * probs.get(r, c);
                        }
                        dl.data[r * probs.cols + t] -= gs;
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::LogSumExp(x) => {
                let xv = self.value(*x);
                let p = softmax(&xv.data);
                let gs = g.item();
                self.accumulate(
                    grads,
                    *x,
                    Matrix::new(xv.rows, xv.cols, p.into_iter().map(|v| v * gs).collect()),
                );
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Matrix::new(r, c, vec![g.item(); r * c]));
            }
        }
    }
}

pub(crate) fn cosine_value(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx2: f64 = x.iter().map(|v| v * v).sum();
    let ny2: f64 = y.iter().map(|v| v * v).sum();
    if nx2 == 0.0 || ny2 == 0.0 {
        0.0
    } else {
        // One square root keeps cos(x, x) exactly 1.
        dot / (nx2 * ny2).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks every input entry of `build` against central differences.
    fn check(inputs: Vec<Matrix>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |ms: &[Matrix]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ms.iter().map(|m| t.param(m.clone())).collect();
            let out = build(&mut t, &vs);
            (t.value(out).item(), t, vs, out)
        };
        let (_, tape, vars, out) = eval(&inputs);
        let grads = tape.backward(out);
        let eps = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or(Matrix::zeros(m.rows, m.cols));
            for i in 0..m.data.len() {
                let mut plus = inputs.clone();
                plus[k].data[i] += eps;
                let mut minus = inputs.clone();
                minus[k].data[i] -= eps;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let a = analytic.data[i];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {k} entry {i}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 5, 4);
        let direct = a.matmul(&b.transpose());
        assert!(direct.max_abs_diff(&a.matmul_bt(&b)) < 1e-12);
        let c = random(&mut rng, 3, 2);
        assert!(a.transpose().matmul(&c).max_abs_diff(&a.matmul_at(&c)) < 1e-12);
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 5, 2)], |t, v| {
            let ab = t.matmul(v[0], v[1]);
            let x = t.matmul_bt(ab, v[2]);
            let y = t.gelu(x);
            t.sum(y)
        });
    }

    #[test]
    fn grad_layer_norm_and_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 4, 4);
        check(vec![random(&mut rng, 4, 4), random(&mut rng, 1, 4), random(&mut rng, 1, 4)], move |t, v| {
            let ln = t.layer_norm(v[0], v[1], v[2]);
            let s = t.softmax_rows(ln, true);
            let wv = t.constant(w.clone());
            let p = t.mul(s, wv);
            t.sum(p)
        });
    }

    #[test]
    fn grad_gather_slice_concat_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(&mut rng, 5, 4), random(&mut rng, 1, 2)], |t, v| {
            let g = t.gather(v[0], &[1, 3, 1]);
            let left = t.slice_cols(g, 0, 2);
            let right = t.slice_cols(g, 2, 2);
            let right = t.add_row(right, v[1]);
            let both = t.concat_cols(&[right, left]);
            let m = t.mean_rows(both, &[0, 2]);
            let sq = t.mul(m, m);
            t.sum(sq)
        });
    }

    #[test]
    fn grad_cosine_ce_lse_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![random(&mut rng, 1, 3), random(&mut rng, 1, 3), random(&mut rng, 3, 6)], |t, v| {
            let c = t.cosine(v[0], v[1]);
            let h = t.add_const(c, 2.0);
            let h = t.relu(h);
            let ce = t.cross_entropy(v[2], &[Some(1), None, Some(5)]);
            let both = t.concat_cols(&[h, ce, c]);
            let l = t.logsumexp(both);
            let s = t.scale(l, 0.5);
            t.sub(s, c)
        });
    }

    #[test]
    fn softmax_is_shift_invariant_and_safe() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let a = softmax(&[0.1, 0.2, 0.3]);
        let b = softmax(&[5.1, 5.2, 5.3]);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::scalar(2.0));
        let p = t.param(Matrix::scalar(3.0));
        let y = t.mul(c, p);
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().item(), 2.0);
    }
}
