use std::borrow::Cow;

use crate::mat::softmax_in_place;
use crate::{Gradients, Mat, ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_2PI: f64 = 1.837_877_066_409_345_5;

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Silu(Var),
    Softplus(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    MeanOfOthers(Var),
    Sum(Var),
    SumSquares(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    BivariateNll {
        mu: Var,
        sigma: Var,
        rho: Var,
        target: Mat,
    },
}

struct Node<'p> {
    value: Cow<'p, Mat>,
    op: Op,
    requires_grad: bool,
}

/// A single-use tape: ops record their inputs as they execute, and
/// [`Graph::backward`] walks the record in reverse.
///
/// Parameters are borrowed from the store, never copied.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => rg(a) || rg(b),
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Silu(a)
            | Op::Softplus(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::MeanRows(a)
            | Op::MeanOfOthers(a)
            | Op::Sum(a)
            | Op::SumSquares(a) => rg(a),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(rg),
            Op::LayerNorm { x, .. } => rg(x),
            Op::Attention { q, k, v, .. } => rg(q) || rg(k) || rg(v),
            Op::CrossEntropy { logits, .. } => rg(logits),
            Op::BivariateNll { mu, sigma, rho, .. } => rg(mu) || rg(sigma) || rg(rho),
        }
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant)
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.store.get(id)),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Broadcasts a 1×c `row` over the rows of `a` and adds.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a).add_row(self.value(row));
        self.push(out, Op::AddRow(a, row))
    }

    /// Broadcasts a 1×c `row` over the rows of `a` and multiplies.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.shape(), (1, am.cols()), "mul_row shape mismatch");
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (x, s) in out.row_mut(r).iter_mut().zip(rm.data()) {
                *x *= s;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        self.push(out, Op::SliceCols(a, start))
    }

    /// Mean over rows, giving 1×c.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out = m.sum_rows().scaled(1.0 / m.rows() as f64);
        self.push(out, Op::MeanRows(a))
    }

    /// Row `i` of the result is the mean of every other row of `a` (zeros
    /// for a single row).
    ///
    /// Each column is summed in sorted order, so the result for a row does
    /// not depend on how the other rows are ordered, bit for bit.
    pub fn mean_of_others(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (n, c) = m.shape();
        let mut out = Mat::zeros(n, c);
        if n > 1 {
            let inv = 1.0 / (n - 1) as f64;
            let mut column = Vec::with_capacity(n - 1);
            for i in 0..n {
                for j in 0..c {
                    column.clear();
                    column.extend((0..n).filter(|&r| r != i).map(|r| m.get(r, j)));
                    column.sort_unstable_by(f64::total_cmp);
                    out.set(i, j, column.iter().sum::<f64>() * inv);
                }
            }
        }
        self.push(out, Op::MeanOfOthers(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum_squares());
        self.push(out, Op::SumSquares(a))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let m = self.value(x);
        let cols = m.cols() as f64;
        let mut out = m.clone();
        let mut inv_std = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// Scaled dot-product attention with `heads` column groups.
    ///
    /// `q` is n×d, `k` is m×d and `v` is m×dv; both d and dv must divide by
    /// `heads`. Each head uses scale 1/√(d/heads).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qm.cols(), km.cols(), "query/key width mismatch");
        assert_eq!(km.rows(), vm.rows(), "key/value length mismatch");
        assert!(heads > 0 && qm.cols() % heads == 0 && vm.cols() % heads == 0);
        let dh = qm.cols() / heads;
        let dvh = vm.cols() / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(qm.rows(), vm.cols());
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = qm.slice_cols(h * dh, dh);
            let kh = km.slice_cols(h * dh, dh);
            let vh = vm.slice_cols(h * dvh, dvh);
            let mut p = qh.matmul_nt(&kh);
            p.scale_assign(scale);
            for r in 0..p.rows() {
                softmax_in_place(p.row_mut(r));
            }
            let oh = p.matmul(&vh);
            for r in 0..out.rows() {
                out.row_mut(r)[h * dvh..(h + 1) * dvh].copy_from_slice(oh.row(r));
            }
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// `logsumexp(logits) - logits[target]` for a 1×C row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), 1, "cross_entropy expects a single row");
        assert!(target < l.cols(), "target class out of range");
        let mut probs = l.data().to_vec();
        softmax_in_place(&mut probs);
        let max = l.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let out = Mat::scalar(lse - l.get(0, target));
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        )
    }

    /// Mean over rows of the bivariate normal negative log density of
    /// `target` (T×2) under per-row means `mu` (T×2), standard deviations
    /// `sigma` (T×2, positive) and correlations `rho` (T×1, |ρ| < 1).
    pub fn bivariate_nll(&mut self, mu: Var, sigma: Var, rho: Var, target: Mat) -> Var {
        let (m, s, r) = (self.value(mu), self.value(sigma), self.value(rho));
        let t = target.rows();
        assert_eq!(m.shape(), (t, 2));
        assert_eq!(s.shape(), (t, 2));
        assert_eq!(r.shape(), (t, 1));
        assert_eq!(target.cols(), 2);
        let mut total = 0.0;
        for i in 0..t {
            total += bivariate_terms(
                target.get(i, 0) - m.get(i, 0),
                target.get(i, 1) - m.get(i, 1),
                s.get(i, 0),
                s.get(i, 1),
                r.get(i, 0),
            )
            .0;
        }
        let out = Mat::scalar(total / t as f64);
        self.push(
            out,
            Op::BivariateNll {
                mu,
                sigma,
                rho,
                target,
            },
        )
    }

    /// Reverse pass from `loss`, seeded with ones of the loss shape.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let (lr, lc) = self.shape(loss);
        grads[loss.0] = Some(Mat::filled(lr, lc, 1.0));
        let mut out = Gradients::empty(self.store.len());

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads, &mut out);
        }
        out
    }

    fn propagate(
        &self,
        node: &Node<'p>,
        g: &Mat,
        grads: &mut [Option<Mat>],
        out: &mut Gradients,
    ) {
        let mut send = |v: Var, d: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let y = &*node.value;

        match &node.op {
            Op::Constant => {}
            Op::Param(id) => out.accumulate_into(*id, g),
            Op::MatMul(a, b) => {
                if rg(*a) {
                    send(*a, g.matmul_nt(self.value(*b)));
                }
                if rg(*b) {
                    send(*b, self.value(*a).matmul_tn(g));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if rg(*b) {
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                if rg(*row) {
                    send(*row, g.sum_rows());
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if rg(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, s) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    send(*a, ga);
                }
                if rg(*row) {
                    send(*row, g.zip_map(self.value(*a), |x, y| x * y).sum_rows());
                }
            }
            Op::Scale(a, s) => send(*a, g.scaled(*s)),
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Sigmoid(a) => send(*a, g.zip_map(y, |d, s| d * s * (1.0 - s))),
            Op::Tanh(a) => send(*a, g.zip_map(y, |d, t| d * (1.0 - t * t))),
            Op::Relu(a) => send(
                *a,
                g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 }),
            ),
            Op::Silu(a) => send(
                *a,
                g.zip_map(self.value(*a), |d, x| {
                    let s = sigmoid(x);
                    d * (s + x * s * (1.0 - s))
                }),
            ),
            Op::Softplus(a) => send(*a, g.zip_map(self.value(*a), |d, x| d * sigmoid(x))),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if rg(p) {
                        send(p, g.slice_cols(offset, c));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if rg(p) {
                        send(p, g.slice_rows(offset, r));
                    }
                    offset += r;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut ga = Mat::zeros(src.rows(), src.cols());
                ga.data_mut()[start * src.cols()..(start + g.rows()) * src.cols()]
                    .copy_from_slice(g.data());
                send(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut ga = Mat::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                send(*a, ga);
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let inv = 1.0 / src.rows() as f64;
                let mut ga = Mat::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    for (x, d) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *x = d * inv;
                    }
                }
                send(*a, ga);
            }
            Op::MeanOfOthers(a) => {
                let (n, c) = g.shape();
                let mut ga = Mat::zeros(n, c);
                if n > 1 {
                    let inv = 1.0 / (n - 1) as f64;
                    let total = g.sum_rows();
                    for r in 0..n {
                        for (j, x) in ga.row_mut(r).iter_mut().enumerate() {
                            *x = (total.get(0, j) - g.get(r, j)) * inv;
                        }
                    }
                }
                send(*a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                send(*a, Mat::filled(r, c, g.item()));
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.item();
                send(*a, self.value(*a).scaled(s));
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = y.cols() as f64;
                let mut gx = Mat::zeros(y.rows(), y.cols());
                for (r, &inv) in inv_std.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / cols;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for ((o, &gi), &yi) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv * (gi - mean_g - yi * mean_gy);
                    }
                }
                send(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let dh = qm.cols() / heads;
                let dvh = vm.cols() / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Mat::zeros(qm.rows(), qm.cols());
                let mut gk = Mat::zeros(km.rows(), km.cols());
                let mut gv = Mat::zeros(vm.rows(), vm.cols());
                for (h, p) in probs.iter().enumerate() {
                    let go = g.slice_cols(h * dvh, dvh);
                    let vh = vm.slice_cols(h * dvh, dvh);
                    let gvh = p.matmul_tn(&go);
                    let gp = go.matmul_nt(&vh);
                    let mut gs = Mat::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let (pr, gpr) = (p.row(r), gp.row(r));
                        let dot: f64 = pr.iter().zip(gpr).map(|(a, b)| a * b).sum();
                        for ((o, &pi), &gi) in gs.row_mut(r).iter_mut().zip(pr).zip(gpr) {
                            *o = pi * (gi - dot) * scale;
                        }
                    }
                    let gqh = gs.matmul(&km.slice_cols(h * dh, dh));
                    let gkh = gs.matmul_tn(&qm.slice_cols(h * dh, dh));
                    for r in 0..gq.rows() {
                        gq.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(gqh.row(r));
                    }
                    for r in 0..gk.rows() {
                        gk.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(gkh.row(r));
                        gv.row_mut(r)[h * dvh..(h + 1) * dvh].copy_from_slice(gvh.row(r));
                    }
                }
                // q, k and v are often the same node; send() accumulates.
                send(*q, gq);
                send(*k, gk);
                send(*v, gv);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let s = g.item();
                let mut gl = probs.clone();
                gl[*target] -= 1.0;
                for x in &mut gl {
                    *x *= s;
                }
                send(*logits, Mat::from_vec(1, gl.len(), gl));
            }
            Op::BivariateNll {
                mu,
                sigma,
                rho,
                target,
            } => {
                let (m, s, r) = (self.value(*mu), self.value(*sigma), self.value(*rho));
                let t = target.rows();
                let w = g.item() / t as f64;
                let mut gm = Mat::zeros(t, 2);
                let mut gs = Mat::zeros(t, 2);
                let mut gr = Mat::zeros(t, 1);
                for i in 0..t {
                    let (_, d) = bivariate_terms(
                        target.get(i, 0) - m.get(i, 0),
                        target.get(i, 1) - m.get(i, 1),
                        s.get(i, 0),
                        s.get(i, 1),
                        r.get(i, 0),
                    );
                    gm.set(i, 0, w * d.mu_x);
                    gm.set(i, 1, w * d.mu_y);
                    gs.set(i, 0, w * d.sigma_x);
                    gs.set(i, 1, w * d.sigma_y);
                    gr.set(i, 0, w * d.rho);
                }
                if rg(*mu) {
                    send(*mu, gm);
                }
                if rg(*sigma) {
                    send(*sigma, gs);
                }
                if rg(*rho) {
                    send(*rho, gr);
                }
            }
        }
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

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

struct BivariateGrad {
    mu_x: f64,
    mu_y: f64,
    sigma_x: f64,
    sigma_y: f64,
    rho: f64,
}

/// NLL of one bivariate normal point given residuals `dx = x - μx`,
/// `dy = y - μy`, plus its partial derivatives.
fn bivariate_terms(dx: f64, dy: f64, sx: f64, sy: f64, rho: f64) -> (f64, BivariateGrad) {
    let q = 1.0 - rho * rho;
    let z = dx * dx / (sx * sx) + dy * dy / (sy * sy) - 2.0 * rho * dx * dy / (sx * sy);
    let nll = LN_2PI + sx.ln() + sy.ln() + 0.5 * q.ln() + z / (2.0 * q);

    let dz_ddx = 2.0 * dx / (sx * sx) - 2.0 * rho * dy / (sx * sy);
    let dz_ddy = 2.0 * dy / (sy * sy) - 2.0 * rho * dx / (sx * sy);
    let dz_dsx = -2.0 * dx * dx / (sx * sx * sx) + 2.0 * rho * dx * dy / (sx * sx * sy);
    let dz_dsy = -2.0 * dy * dy / (sy * sy * sy) + 2.0 * rho * dx * dy / (sx * sy * sy);
    let dz_drho = -2.0 * dx * dy / (sx * sy);
    let grad = BivariateGrad {
        mu_x: -dz_ddx / (2.0 * q),
        mu_y: -dz_ddy / (2.0 * q),
        sigma_x: 1.0 / sx + dz_dsx / (2.0 * q),
        sigma_y: 1.0 / sy + dz_dsy / (2.0 * q),
        rho: -rho / q + dz_drho / (2.0 * q) + z * rho / (q * q),
    };
    (nll, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_nodes_are_shared() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::scalar(3.0));
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn constants_receive_no_gradient_work() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let c = g.constant(Mat::scalar(2.0));
        let y = g.sum_squares(c);
        let grads = g.backward(y);
        assert_eq!(grads.global_norm(), 0.0);
    }

    #[test]
    fn unit_bivariate_at_mode_is_log_two_pi() {
        let (nll, _) = bivariate_terms(0.0, 0.0, 1.0, 1.0, 0.0);
        assert!((nll - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn mean_of_others_ignores_neighbor_order() {
        let store = ParamStore::new();
        let rows = [[0.1, 1e16], [0.2, 1.0], [0.3, -1e16], [1e-17, 3.0]];
        let perm = [0usize, 3, 1, 2];
        let mut g = Graph::new(&store);
        let a = g.constant(Mat::from_rows(&rows.map(|r| r.to_vec())));
        let b = g.constant(Mat::from_rows(&perm.map(|i| rows[i].to_vec())));
        let (ma, mb) = (g.mean_of_others(a), g.mean_of_others(b));
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(g.value(ma).row(i), g.value(mb).row(k));
        }
        let mut g = Graph::new(&store);
        let single = g.constant(Mat::from_rows(&[vec![4.0, 5.0]]));
        let m = g.mean_of_others(single);
        assert_eq!(g.value(m).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
