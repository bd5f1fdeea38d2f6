//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. Node ids are assigned in creation order, which is already a
//! topological order, so [`Tape::backward`] simply walks the node list in
//! reverse and accumulates into input gradients.

use super::matrix::{matmul_acc, matmul_t_acc, t_matmul_acc, Matrix};
use super::NnError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a · wᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + bias` with `bias` a `1 × c` row broadcast over the rows of `a`.
    AddRow(Var, Var),
    /// `1 × c` row repeated to the node's row count.
    BroadcastRows(Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    /// Row-wise outer product: `out[b, i·q + j] = a[b, i] · c[b, j]`.
    OuterRows(Var, Var),
    /// Activated LSTM gates `[i | f | o | g]`.
    LstmGates {
        x: Var,
        h: Var,
        w: Var,
        u: Var,
        b: Var,
    },
    /// `c = f ⊙ c_prev + i ⊙ g`
    LstmCell {
        gates: Var,
        c_prev: Var,
    },
    /// `h = o ⊙ tanh(c)`
    LstmHidden {
        gates: Var,
        c: Var,
    },
    Mse {
        pred: Var,
        target: Matrix,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    SumAll(Var),
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads[var.0].as_ref()
    }

    /// Gradient of `var`, or zeros of its shape when the loss does not
    /// depend on it.
    pub fn wrt(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Matrix {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.shape(), (1, 1));
        v.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
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

    pub fn matmul_t(&mut self, a: Var, w: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(w));
        let rg = self.rg(a) || self.rg(w);
        self.push(value, Op::MatMulT(a, w), rg)
    }

    /// Dense layer `a · wᵀ + b`.
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Var {
        let z = self.matmul_t(a, w);
        self.add_row(z, b)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        Matrix::from_vec(
            va.rows(),
            va.cols(),
            va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let vb = self.value(bias);
        assert_eq!(vb.rows(), 1, "bias must be a row vector");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), vb.cols(), "bias width mismatch");
        let bias_row = vb.data().to_vec();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(&bias_row) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Var {
        let v = self.value(row);
        assert_eq!(v.rows(), 1, "broadcast source must be a row vector");
        let cols = v.cols();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(row);
        self.push(Matrix::from_vec(rows, cols, data), Op::BroadcastRows(row), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let v = self.value(*p);
                assert_eq!(v.rows(), rows, "concat row mismatch");
                value.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.cols(), "column slice out of range");
        let value = Matrix::from_fn(v.rows(), len, |r, c| v.get(r, start + c));
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Embedding lookup: row `indices[k]` of `table` becomes output row `k`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let value = Matrix::from_fn(indices.len(), t.cols(), |r, c| t.get(indices[r], c));
        let rg = self.rg(table);
        self.push(value, Op::GatherRows(table, indices.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshaped(rows, cols);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn outer_rows(&mut self, a: Var, c: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(c));
        assert_eq!(va.rows(), vc.rows(), "outer_rows row mismatch");
        let (p, q) = (va.cols(), vc.cols());
        let mut value = Matrix::zeros(va.rows(), p * q);
        for b in 0..va.rows() {
            let (ra, rc) = (va.row(b), vc.row(b));
            let out = value.row_mut(b);
            for i in 0..p {
                for j in 0..q {
                    out[i * q + j] = ra[i] * rc[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(c);
        self.push(value, Op::OuterRows(a, c), rg)
    }

    /// Activated gates of one LSTM step, laid out `[i | f | o | g]`.
    pub fn lstm_gates(&mut self, x: Var, h: Var, w: Var, u: Var, b: Var) -> Var {
        let hidden = self.value(u).cols();
        let mut z = self.value(x).matmul_t(self.value(w));
        matmul_t_acc(self.value(h), self.value(u), &mut z);
        let bias = self.value(b).data().to_vec();
        assert_eq!(bias.len(), 4 * hidden, "gate bias width mismatch");
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            for (k, v) in row.iter_mut().enumerate() {
                let pre = *v + bias[k];
                *v = if k < 3 * hidden { sigmoid(pre) } else { pre.tanh() };
            }
        }
        let rg = [x, h, w, u, b].iter().any(|v| self.rg(*v));
        self.push(z, Op::LstmGates { x, h, w, u, b }, rg)
    }

    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let g = self.value(gates);
        let cp = self.value(c_prev);
        let hd = cp.cols();
        assert_eq!(g.cols(), 4 * hd, "gate width mismatch");
        let value = Matrix::from_fn(cp.rows(), hd, |r, k| {
            let row = g.row(r);
            row[hd + k] * cp.get(r, k) + row[k] * row[3 * hd + k]
        });
        let rg = self.rg(gates) || self.rg(c_prev);
        self.push(value, Op::LstmCell { gates, c_prev }, rg)
    }

    pub fn lstm_hidden(&mut self, gates: Var, c: Var) -> Var {
        let g = self.value(gates);
        let cv = self.value(c);
        let hd = cv.cols();
        let value = Matrix::from_fn(cv.rows(), hd, |r, k| g.get(r, 2 * hd + k) * cv.get(r, k).tanh());
        let rg = self.rg(gates) || self.rg(c);
        self.push(value, Op::LstmHidden { gates, c }, rg)
    }

    /// Mean squared error against a fixed target; a `1 × 1` node.
    pub fn mse(&mut self, pred: Var, target: Matrix) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse shape mismatch");
        let n = p.len().max(1) as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        self.push(Matrix::scalar(loss), Op::Mse { pred, target }, rg)
    }

    /// Mean over rows of the softmax cross-entropy against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), labels.len(), "one label per row");
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut loss = 0.0;
        for r in 0..l.rows() {
            let row = l.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (k, v) in row.iter().enumerate() {
                probs.set(r, k, (v - max).exp() / denom);
            }
            loss += denom.ln() + max - row[labels[r]];
        }
        loss /= l.rows().max(1) as f64;
        let rg = self.rg(logits);
        self.push(
            Matrix::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Matrix::scalar(s), Op::SumAll(a), rg)
    }

    /// `Σ wᵢ · sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s: f64 = terms
            .iter()
            .map(|(v, w)| {
                assert_eq!(self.value(*v).shape(), (1, 1), "weighted_sum takes scalars");
                self.value(*v).data()[0] * w
            })
            .sum();
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        self.push(Matrix::scalar(s), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Exact reverse-mode gradients of the scalar `loss` with respect to
    /// every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NnError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        if !lv.data()[0].is_finite() {
            return Err(NnError::NonFiniteLoss(lv.data()[0]));
        }
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Matrix>], v: Var) -> Option<&'g mut Matrix> {
        if !self.rg(v) {
            return None;
        }
        let (r, c) = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMulT(a, w) => {
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_acc(g, self.value(*w), ga);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    t_matmul_acc(g, self.value(*a), gw);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (x, y) in gb.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(vb) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(va) {
                        *x += gi * ai;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    add_column_sums(g, gb);
                }
            }
            Op::BroadcastRows(row) => {
                if let Some(gr) = self.slot(grads, *row) {
                    add_column_sums(g, gr);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y) {
                        *x += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y) {
                        *x += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (x, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += gi * f;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(gp) = self.slot(grads, *p) {
                        for r in 0..g.rows() {
                            for (x, gi) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *x += gi;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..g.rows() {
                        let dst = &mut ga.row_mut(r)[*start..*start + g.cols()];
                        for (x, gi) in dst.iter_mut().zip(g.row(r)) {
                            *x += gi;
                        }
                    }
                }
            }
            Op::GatherRows(table, indices) => {
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &i) in indices.iter().enumerate() {
                        for (x, gi) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *x += gi;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (x, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += gi;
                    }
                }
            }
            Op::OuterRows(a, c) => {
                let (va, vc) = (self.value(*a), self.value(*c));
                let (p, q) = (va.cols(), vc.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    for b in 0..g.rows() {
                        let (gr, rc) = (g.row(b), vc.row(b));
                        let dst = ga.row_mut(b);
                        for i in 0..p {
                            let mut s = 0.0;
                            for j in 0..q {
                                s += gr[i * q + j] * rc[j];
                            }
                            dst[i] += s;
                        }
                    }
                }
                if let Some(gc) = self.slot(grads, *c) {
                    for b in 0..g.rows() {
                        let (gr, ra) = (g.row(b), va.row(b));
                        let dst = gc.row_mut(b);
                        for i in 0..p {
                            for j in 0..q {
                                dst[j] += gr[i * q + j] * ra[i];
                            }
                        }
                    }
                }
            }
            Op::LstmGates { x, h, w, u, b } => {
                // Incoming gradient is w.r.t. the activated gates; convert to
                // pre-activation gradient first.
                let hidden = self.value(*u).cols();
                let act = &node.value;
                let mut dz = g.clone();
                for r in 0..dz.rows() {
                    let (dr, ar) = (dz.row_mut(r), act.row(r));
                    for k in 0..4 * hidden {
                        let a = ar[k];
                        dr[k] *= if k < 3 * hidden { a * (1.0 - a) } else { 1.0 - a * a };
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    matmul_acc(&dz, self.value(*w), gx);
                }
                if let Some(gh) = self.slot(grads, *h) {
                    matmul_acc(&dz, self.value(*u), gh);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    t_matmul_acc(&dz, self.value(*x), gw);
                }
                if let Some(gu) = self.slot(grads, *u) {
                    t_matmul_acc(&dz, self.value(*h), gu);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_column_sums(&dz, gb);
                }
            }
            Op::LstmCell { gates, c_prev } => {
                let gv = self.value(*gates);
                let cp = self.value(*c_prev);
                let hd = cp.cols();
                if let Some(gg) = self.slot(grads, *gates) {
                    for r in 0..g.rows() {
                        let (dc, gr, cpr) = (g.row(r), gv.row(r), cp.row(r));
                        let dst = gg.row_mut(r);
                        for k in 0..hd {
                            dst[k] += dc[k] * gr[3 * hd + k];
                            dst[hd + k] += dc[k] * cpr[k];
                            dst[3 * hd + k] += dc[k] * gr[k];
                        }
                    }
                }
                if let Some(gc) = self.slot(grads, *c_prev) {
                    for r in 0..g.rows() {
                        let (dc, gr) = (g.row(r), gv.row(r));
                        let dst = gc.row_mut(r);
                        for k in 0..hd {
                            dst[k] += dc[k] * gr[hd + k];
                        }
                    }
                }
            }
            Op::LstmHidden { gates, c } => {
                let gv = self.value(*gates);
                let cv = self.value(*c);
                let hd = cv.cols();
                if let Some(gg) = self.slot(grads, *gates) {
                    for r in 0..g.rows() {
                        let (dh, cr) = (g.row(r), cv.row(r));
                        let dst = gg.row_mut(r);
                        for k in 0..hd {
                            dst[2 * hd + k] += dh[k] * cr[k].tanh();
                        }
                    }
                }
                if let Some(gc) = self.slot(grads, *c) {
                    for r in 0..g.rows() {
                        let (dh, cr, gr) = (g.row(r), cv.row(r), gv.row(r));
                        let dst = gc.row_mut(r);
                        for k in 0..hd {
                            let t = cr[k].tanh();
                            dst[k] += dh[k] * gr[2 * hd + k] * (1.0 - t * t);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let scale = 2.0 * g.data()[0] / target.len().max(1) as f64;
                let p = self.value(*pred).data();
                if let Some(gp) = self.slot(grads, *pred) {
                    for ((x, pi), ti) in gp.data_mut().iter_mut().zip(p).zip(target.data()) {
                        *x += scale * (pi - ti);
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let scale = g.data()[0] / labels.len().max(1) as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        let (dst, pr) = (gl.row_mut(r), probs.row(r));
                        for k in 0..pr.len() {
                            let onehot = if k == label { 1.0 } else { 0.0 };
                            dst[k] += scale * (pr[k] - onehot);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let s = g.data()[0];
                if let Some(ga) = self.slot(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|x| *x += s);
                }
            }
            Op::WeightedSum(terms) => {
                let s = g.data()[0];
                for (v, w) in terms {
                    if let Some(gv) = self.slot(grads, *v) {
                        gv.data_mut()[0] += s * w;
                    }
                }
            }
        }
    }
}

fn add_column_sums(g: &Matrix, dst: &mut Matrix) {
    let out = dst.data_mut();
    for r in 0..g.rows() {
        for (x, gi) in out.iter_mut().zip(g.row(r)) {
            *x += gi;
        }
    }
}
