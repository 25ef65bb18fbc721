//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only tape. Each operation evaluates eagerly and
//! records how to push an upstream gradient back to its inputs. Nodes created
//! with [`Graph::constant`] (and everything computed only from constants) are
//! skipped during the backward sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{axpy, dot, CsrMatrix, Matrix};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'a> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    SpMM(&'a CsrMatrix, Var),
    VStack(Var, Var),
    HStack(Var, Var),
    Gather(Var, Vec<usize>),
    ScaleRows(Var, Vec<f64>),
    AddRowBroadcast(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    RowDot(Var, Var),
    RowNormalize(Var),
    RowCosine(Var, Var),
    MulCol(Var, Var),
    DivScalar(Var, Var),
    SumSquares(Var),
    Mse(Var, Var),
    InfoNce { pos: Var, neg: Var, softmax: Matrix },
    NegLogSigmoidMean(Var),
}

struct Node<'a> {
    value: Matrix,
    op: Op<'a>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the node does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `-log σ(x)` evaluated without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        libm::log1p(libm::exp(-x))
    } else {
        -x + libm::log1p(libm::exp(x))
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op<'a>, requires_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Hadamard(a, b), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNt(a, b), rg)
    }

    /// Sparse-dense product `adj · x`.
    pub fn spmm(&mut self, adj: &'a CsrMatrix, x: Var) -> Var {
        let value = adj.mul_dense(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::SpMM(adj, x), rg)
    }

    pub fn vstack(&mut self, top: Var, bottom: Var) -> Var {
        let value = self.value(top).vstack(self.value(bottom));
        let rg = self.rg(top) || self.rg(bottom);
        self.push(value, Op::VStack(top, bottom), rg)
    }

    pub fn hstack(&mut self, left: Var, right: Var) -> Var {
        let value = self.value(left).hstack(self.value(right));
        let rg = self.rg(left) || self.rg(right);
        self.push(value, Op::HStack(left, right), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let value = self.value(x).gather_rows(&idx);
        let rg = self.rg(x);
        self.push(value, Op::Gather(x, idx), rg)
    }

    /// Multiplies row `r` of `x` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let src = self.value(x);
        assert_eq!(src.rows(), factors.len(), "scale_rows length mismatch");
        let mut value = src.clone();
        for (r, &f) in factors.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(x);
        self.push(value, Op::ScaleRows(x, factors), rg)
    }

    /// Adds the `1 × c` row `bias` to every row of `x`.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a single row");
        assert_eq!(b.cols(), self.value(x).cols(), "bias width mismatch");
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            axpy(1.0, b.row(0), value.row_mut(r));
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(value, Op::AddRowBroadcast(x, bias), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Row-wise inner products, `n × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "row_dot shape mismatch");
        let value = Matrix::from_fn(va.rows(), 1, |r, _| dot(va.row(r), vb.row(r)));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::RowDot(a, b), rg)
    }

    /// L2-normalizes each row. Zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = libm::sqrt(dot(row, row));
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::RowNormalize(x), rg)
    }

    /// Row-wise cosine similarity, `n × 1`; 0 where either row has zero norm.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "row_cosine shape mismatch");
        let value = Matrix::from_fn(va.rows(), 1, |r, _| {
            crate::linalg::cosine(va.row(r), vb.row(r))
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::RowCosine(a, b), rg)
    }

    /// Scales row `r` of `x` by `col[r]` where `col` is an `n × 1` node.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let c = self.value(col);
        assert_eq!(c.shape(), (self.value(x).rows(), 1), "mul_col shape mismatch");
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let f = c.get(r, 0);
            value.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(x) || self.rg(col);
        self.push(value, Op::MulCol(x, col), rg)
    }

    /// Divides every entry of `x` by the `1 × 1` node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Var {
        let denom = self.value(s).get(0, 0);
        let value = self.value(x).scale(1.0 / denom);
        let rg = self.rg(x) || self.rg(s);
        self.push(value, Op::DivScalar(x, s), rg)
    }

    /// `Σ x²` as a `1 × 1` node.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(x).squared_norm());
        let rg = self.rg(x);
        self.push(value, Op::SumSquares(x), rg)
    }

    /// Mean of `(a - b)²` over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let n = (va.rows() * va.cols()).max(1) as f64;
        let s: f64 = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Matrix::filled(1, 1, s / n), Op::Mse(a, b), rg)
    }

    /// InfoNCE cross-entropy with the positive at index 0 of each row.
    ///
    /// `pos` is `n × 1`, `neg` is `n × n`. Row `i` competes `pos[i]` against
    /// `neg[i][j]` for every `j ≠ i`; the diagonal of `neg` is ignored. The
    /// result is the mean over rows of `logsumexp(row) - pos[i]`.
    pub fn info_nce(&mut self, pos: Var, neg: Var) -> Var {
        let (vp, vn) = (self.value(pos), self.value(neg));
        let n = vp.rows();
        assert_eq!(vp.cols(), 1, "info_nce positives must be a column");
        assert_eq!(vn.shape(), (n, n), "info_nce negatives must be n × n");
        // The diagonal slot of `softmax` holds the positive's probability.
        let mut softmax = Matrix::zeros(n, n);
        let mut total = 0.0;
        for i in 0..n {
            let p = vp.get(i, 0);
            let mut m = p;
            for j in 0..n {
                if j != i {
                    m = m.max(vn.get(i, j));
                }
            }
            let mut z = 0.0;
            for j in 0..n {
                let s = if j == i { p } else { vn.get(i, j) };
                let e = libm::exp(s - m);
                softmax.set(i, j, e);
                z += e;
            }
            softmax.row_mut(i).iter_mut().for_each(|v| *v /= z);
            total += m + libm::log(z) - p;
        }
        let value = Matrix::filled(1, 1, total / n as f64);
        let rg = self.rg(pos) || self.rg(neg);
        self.push(value, Op::InfoNce { pos, neg, softmax }, rg)
    }

    /// Mean of `-log σ(x)` over all entries.
    pub fn neg_log_sigmoid_mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = (vx.rows() * vx.cols()).max(1) as f64;
        let s: f64 = vx.as_slice().iter().map(|&v| neg_log_sigmoid(v)).sum();
        let rg = self.rg(x);
        self.push(Matrix::filled(1, 1, s / n), Op::NegLogSigmoidMean(x), rg)
    }

    /// Reverse sweep from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<'a>, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Hadamard(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a)));
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::SpMM(adj, x) => self.accumulate(grads, *x, adj.mul_dense_transposed(g)),
            Op::VStack(top, bottom) => {
                let split = self.value(*top).rows();
                if self.rg(*top) {
                    self.accumulate(grads, *top, g.slice_rows(0, split));
                }
                if self.rg(*bottom) {
                    self.accumulate(grads, *bottom, g.slice_rows(split, g.rows()));
                }
            }
            Op::HStack(left, right) => {
                let split = self.value(*left).cols();
                if self.rg(*left) {
                    self.accumulate(grads, *left, g.slice_cols(0, split));
                }
                if self.rg(*right) {
                    self.accumulate(grads, *right, g.slice_cols(split, g.cols()));
                }
            }
            Op::Gather(x, idx) => {
                let src = self.value(*x);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in idx.iter().enumerate() {
                    axpy(1.0, g.row(r), dx.row_mut(i));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ScaleRows(x, factors) => {
                let mut dx = g.clone();
                for (r, &f) in factors.iter().enumerate() {
                    dx.row_mut(r).iter_mut().for_each(|v| *v *= f);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AddRowBroadcast(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), db.row_mut(0));
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Silu(x) => {
                let dx = self.value(*x).zip_map(g, |v, gv| {
                    let s = sigmoid(v);
                    gv * (s + v * s * (1.0 - s))
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = out.zip_map(g, |s, gv| gv * s * (1.0 - s));
                self.accumulate(grads, *x, dx);
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut da = vb.clone();
                    for r in 0..da.rows() {
                        let f = g.get(r, 0);
                        da.row_mut(r).iter_mut().for_each(|v| *v *= f);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = va.clone();
                    for r in 0..db.rows() {
                        let f = g.get(r, 0);
                        db.row_mut(r).iter_mut().for_each(|v| *v *= f);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::RowNormalize(x) => {
                let src = self.value(*x);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    let n = libm::sqrt(dot(src.row(r), src.row(r)));
                    if n == 0.0 {
                        continue;
                    }
                    let y = out.row(r);
                    let gr = g.row(r);
                    let proj = dot(y, gr);
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = (gv - yv * proj) / n;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowCosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = Matrix::zeros(va.rows(), va.cols());
                let mut db = Matrix::zeros(vb.rows(), vb.cols());
                for r in 0..va.rows() {
                    let (ra, rb) = (va.row(r), vb.row(r));
                    let (na, nb) = (libm::sqrt(dot(ra, ra)), libm::sqrt(dot(rb, rb)));
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let c = out.get(r, 0);
                    let gv = g.get(r, 0);
                    for k in 0..ra.len() {
                        da.set(r, k, gv * (rb[k] / (na * nb) - c * ra[k] / (na * na)));
                        db.set(r, k, gv * (ra[k] / (na * nb) - c * rb[k] / (nb * nb)));
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::MulCol(x, col) => {
                let (vx, vc) = (self.value(*x), self.value(*col));
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        let f = vc.get(r, 0);
                        dx.row_mut(r).iter_mut().for_each(|v| *v *= f);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*col) {
                    let dc = Matrix::from_fn(vx.rows(), 1, |r, _| dot(g.row(r), vx.row(r)));
                    self.accumulate(grads, *col, dc);
                }
            }
            Op::DivScalar(x, s) => {
                let denom = self.value(*s).get(0, 0);
                if self.rg(*x) {
                    self.accumulate(grads, *x, g.scale(1.0 / denom));
                }
                if self.rg(*s) {
                    let num = dot(g.as_slice(), self.value(*x).as_slice());
                    self.accumulate(grads, *s, Matrix::filled(1, 1, -num / (denom * denom)));
                }
            }
            Op::SumSquares(x) => {
                let gv = g.get(0, 0);
                self.accumulate(grads, *x, self.value(*x).scale(2.0 * gv));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = (va.rows() * va.cols()).max(1) as f64;
                let gv = g.get(0, 0);
                let diff = va.sub(vb).scale(2.0 * gv / n);
                if self.rg(*b) {
                    self.accumulate(grads, *b, diff.scale(-1.0));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::InfoNce { pos, neg, softmax } => {
                let n = softmax.rows();
                let gv = g.get(0, 0) / n as f64;
                if self.rg(*pos) {
                    let dp = Matrix::from_fn(n, 1, |i, _| gv * (softmax.get(i, i) - 1.0));
                    self.accumulate(grads, *pos, dp);
                }
                if self.rg(*neg) {
                    let dn = Matrix::from_fn(n, n, |i, j| {
                        if i == j {
                            0.0
                        } else {
                            gv * softmax.get(i, j)
                        }
                    });
                    self.accumulate(grads, *neg, dn);
                }
            }
            Op::NegLogSigmoidMean(x) => {
                let vx = self.value(*x);
                let n = (vx.rows() * vx.cols()).max(1) as f64;
                let gv = g.get(0, 0) / n;
                let dx = vx.map(|v| -gv * sigmoid(-v));
                self.accumulate(grads, *x, dx);
            }
        }
    }
}
