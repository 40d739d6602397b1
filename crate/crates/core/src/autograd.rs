//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape once in reverse. Nodes that
//! cannot reach a trainable parameter or a gradient-tracked input are marked
//! `needs_grad = false` and skipped entirely during the backward pass.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::tensor::Mat;

/// Gather index meaning "emit zero" (used for zero padding).
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range `(start, len)` used to segment attention.
pub type Segment = (usize, usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Mat>),
    AddConst(Var),
    Gelu(Var),
    LayerNorm(Var),
    Gather(Var, Rc<Vec<usize>>),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, heads: usize, qseg: Rc<Vec<Segment>>, kseg: Rc<Vec<Segment>> },
    RowL2Normalize(Var),
    LogSumExpRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    SigmoidBce(Var, Rc<Mat>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
    /// Op-specific forward cache (attention probabilities, inverse norms, ...).
    aux: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<usize, Var>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: BTreeMap<usize, Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for parameter `id`; `None` when the parameter was unused.
    pub fn param(&self, id: usize) -> Option<&Mat> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.keys().copied()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node { value, op, needs_grad, aux });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Untracked constant.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false, Vec::new())
    }

    /// Leaf whose gradient is recorded (used for input-gradient checks).
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true, Vec::new())
    }

    /// Trainable parameter node; repeated calls with one id share a node.
    pub fn param(&mut self, id: usize, value: &Mat) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true, Vec::new());
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng, Vec::new())
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng, Vec::new())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Mat::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng, Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// `a[i, :] + row[0, :]` for every row `i`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols()), r.shape(), "add_row shape mismatch");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng, Vec::new())
    }

    /// `a[i, :] * row[0, :]` for every row `i`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols()), r.shape(), "mul_row shape mismatch");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng, Vec::new())
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng, Vec::new())
    }

    /// Elementwise product with an untracked matrix.
    pub fn mul_const(&mut self, a: Var, c: Rc<Mat>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), c.shape(), "mul_const shape mismatch");
        let data = x.data().iter().zip(c.data()).map(|(p, q)| p * q).collect();
        let out = Mat::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::MulConst(a, c), ng, Vec::new())
    }

    /// Elementwise sum with an untracked matrix (entries may be `-inf` masks).
    pub fn add_const(&mut self, a: Var, c: Rc<Mat>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), c.shape(), "add_const shape mismatch");
        let data = x.data().iter().zip(c.data()).map(|(p, q)| p + q).collect();
        let out = Mat::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::AddConst(a), ng, Vec::new())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng, Vec::new())
    }

    /// Per-row standardisation (zero mean, unit variance), no affine part.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c) = x.shape();
        let mut out = Mat::zeros(n, c);
        let mut inv = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            inv.push(r);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a), ng, inv)
    }

    /// `out.data[i] = src.data[idx[i]]`, or 0 where `idx[i] == GATHER_ZERO`.
    pub fn gather(&mut self, src: Var, idx: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather: index length mismatch");
        let s = self.value(src).data();
        let data = idx.iter().map(|&i| if i == GATHER_ZERO { 0.0 } else { s[i] }).collect();
        let ng = self.ng(src);
        self.push(Mat::from_vec(rows, cols, data), Op::Gather(src, idx), ng, Vec::new())
    }

    /// Whole rows of `src`, in the given order (repeats allowed).
    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let c = self.value(src).cols();
        let idx: Vec<usize> = rows.iter().flat_map(|&r| (r * c)..(r * c + c)).collect();
        self.gather(src, Rc::new(idx), rows.len(), c)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = Mat::from_vec(rows, cols, self.value(a).data().to_vec());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng, Vec::new())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Mat::vstack(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng, Vec::new())
    }

    /// Segmented multi-head scaled dot-product attention without projections.
    ///
    /// Query segment `s` attends only to key segment `s`; heads split the
    /// columns evenly. Softmax probabilities are cached for the backward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, qseg: Rc<Vec<Segment>>, kseg: Rc<Vec<Segment>>) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols();
        assert!(heads > 0 && d % heads == 0, "attention: {heads} heads do not divide {d}");
        assert_eq!(km.cols(), d, "attention: key width");
        assert_eq!(vm.cols(), d, "attention: value width");
        assert_eq!(km.rows(), vm.rows(), "attention: key/value rows");
        assert_eq!(qseg.len(), kseg.len(), "attention: segment count");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(qm.rows(), d);
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for (&(qs, ql), &(ks, kl)) in qseg.iter().zip(kseg.iter()) {
            assert!(kl > 0, "attention: empty key segment");
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in qs..qs + ql {
                    let qi = &qm.row(i)[cols.clone()];
                    scores.clear();
                    scores.extend((ks..ks + kl).map(|j| crate::tensor::dot(qi, &km.row(j)[cols.clone()]) * scale));
                    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    let orow = &mut out.row_mut(i)[cols.clone()];
                    for (jj, s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs.push(p);
                        let vj = &vm.row(ks + jj)[cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, heads, qseg, kseg }, ng, probs)
    }

    /// Attention probabilities of an attention node, one `[q_len, k_len]`
    /// matrix per (segment, head), segment-major.
    pub fn attention_probs(&self, v: Var) -> Vec<Mat> {
        let node = &self.nodes[v.0];
        let Op::Attention { heads, qseg, kseg, .. } = &node.op else {
            panic!("attention_probs on a non-attention node");
        };
        let mut out = Vec::new();
        let mut off = 0;
        for (&(_, ql), &(_, kl)) in qseg.iter().zip(kseg.iter()) {
            for _ in 0..*heads {
                out.push(Mat::from_vec(ql, kl, node.aux[off..off + ql * kl].to_vec()));
                off += ql * kl;
            }
        }
        out
    }

    /// Rows scaled to unit Euclidean norm.
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let r = 1.0 / crate::tensor::norm(x.row(i));
            out.row_mut(i).iter_mut().for_each(|v| *v *= r);
            inv.push(r);
        }
        let ng = self.ng(a);
        self.push(out, Op::RowL2Normalize(a), ng, inv)
    }

    /// `[n, 1]` column of per-row log-sum-exp; `-inf` entries are excluded.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|i| logsumexp(x.row(i))).collect();
        let ng = self.ng(a);
        self.push(Mat::from_vec(x.rows(), 1, data), Op::LogSumExpRows(a), ng, Vec::new())
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let l = logsumexp(x.row(i));
            out.row_mut(i).iter_mut().for_each(|v| *v -= l);
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng, Vec::new())
    }

    /// `[1, 1]` sum of all entries.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(a), ng, Vec::new())
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: Rc<Mat>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape(), "sigmoid_bce shape mismatch");
        let data = x.data().iter().zip(targets.data()).map(|(&z, &y)| bce_with_logit(z, y)).collect();
        let out = Mat::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(logits);
        self.push(out, Op::SigmoidBce(logits, targets), ng, Vec::new())
    }

    /// Backpropagates from a `[1, 1]` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn accum(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accum(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    self.accum(grads, *a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accum(grads, *a, hadamard(g, self.value(*b)));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::AddRow(a, r) => {
                self.accum(grads, *a, g.clone());
                if self.ng(*r) {
                    self.accum(grads, *r, g.col_sums());
                }
            }
            Op::MulRow(a, r) => {
                let rv = self.value(*r);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (o, s) in ga.row_mut(i).iter_mut().zip(rv.data()) {
                            *o *= s;
                        }
                    }
                    self.accum(grads, *a, ga);
                }
                if self.ng(*r) {
                    self.accum(grads, *r, hadamard(g, self.value(*a)).col_sums());
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.scale(*s)),
            Op::MulConst(a, c) => self.accum(grads, *a, hadamard(g, c)),
            Op::AddConst(a) => self.accum(grads, *a, g.clone()),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = g.data().iter().zip(x.data()).map(|(gi, &xi)| gi * gelu_grad(xi)).collect();
                self.accum(grads, *a, Mat::from_vec(x.rows(), x.cols(), data));
            }
            Op::LayerNorm(a) => {
                let y = &node.value;
                let c = y.cols() as f64;
                let mut gx = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let mg = gr.iter().sum::<f64>() / c;
                    let mgy = crate::tensor::dot(gr, yr) / c;
                    let r = node.aux[i];
                    for ((o, &gi), &yi) in gx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = r * (gi - mg - yi * mgy);
                    }
                }
                self.accum(grads, *a, gx);
            }
            Op::Gather(src, idx) => {
                let s = self.value(*src);
                let mut gs = Mat::zeros(s.rows(), s.cols());
                let gd = gs.data_mut();
                for (&i, &gi) in idx.iter().zip(g.data()) {
                    if i != GATHER_ZERO {
                        gd[i] += gi;
                    }
                }
                self.accum(grads, *src, gs);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.accum(grads, *a, Mat::from_vec(r, c, g.data().to_vec()));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    if self.ng(p) {
                        self.accum(grads, p, Mat::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec()));
                    }
                    off += r;
                }
            }
            Op::Attention { q, k, v, heads, qseg, kseg } => {
                self.attention_backward(node, g, grads, (*q, *k, *v), *heads, qseg, kseg);
            }
            Op::RowL2Normalize(a) => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let proj = crate::tensor::dot(gr, yr);
                    let r = node.aux[i];
                    for ((o, &gi), &yi) in gx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = r * (gi - yi * proj);
                    }
                }
                self.accum(grads, *a, gx);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let mut gx = Mat::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let l = node.value.get(i, 0);
                    let gi = g.get(i, 0);
                    for (o, &xv) in gx.row_mut(i).iter_mut().zip(x.row(i)) {
                        *o = gi * (xv - l).exp();
                    }
                }
                self.accum(grads, *a, gx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let gs: f64 = g.row(i).iter().sum();
                    for ((o, &gi), &yi) in gx.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = gi - yi.exp() * gs;
                    }
                }
                self.accum(grads, *a, gx);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.accum(grads, *a, Mat::filled(r, c, g.get(0, 0)));
            }
            Op::SigmoidBce(a, t) => {
                let x = self.value(*a);
                let data = g.data().iter().zip(x.data()).zip(t.data()).map(|((gi, &z), &y)| gi * (sigmoid(z) - y)).collect();
                self.accum(grads, *a, Mat::from_vec(x.rows(), x.cols(), data));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>], (q, k, v): (Var, Var, Var), heads: usize, qseg: &[Segment], kseg: &[Segment]) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Mat::zeros(qm.rows(), d);
        let mut gk = Mat::zeros(km.rows(), d);
        let mut gv = Mat::zeros(vm.rows(), d);
        let mut off = 0;
        let mut gp = Vec::new();
        for (&(qs, ql), &(ks, kl)) in qseg.iter().zip(kseg.iter()) {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in qs..qs + ql {
                    let p = &node.aux[off..off + kl];
                    off += kl;
                    let gi = &g.row(i)[cols.clone()];
                    gp.clear();
                    gp.extend((0..kl).map(|jj| crate::tensor::dot(gi, &vm.row(ks + jj)[cols.clone()])));
                    let pg: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
                    for jj in 0..kl {
                        let j = ks + jj;
                        let pj = p[jj];
                        for (o, &x) in gv.row_mut(j)[cols.clone()].iter_mut().zip(gi) {
                            *o += pj * x;
                        }
                        let gs = pj * (gp[jj] - pg) * scale;
                        if gs == 0.0 {
                            continue;
                        }
                        let kj = &km.row(j)[cols.clone()];
                        for (o, &x) in gq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                            *o += gs * x;
                        }
                        let qi = &qm.row(i)[cols.clone()];
                        for (o, &x) in gk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                            *o += gs * x;
                        }
                    }
                }
            }
        }
        self.accum(grads, q, gq);
        self.accum(grads, k, gk);
        self.accum(grads, v, gv);
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln σ(z) + (1-y) ln(1-σ(z))]`, evaluated stably.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Log-sum-exp over a slice; `-inf` entries contribute nothing.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn assert_grads(inputs: Vec<Mat>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let report = check_inputs(&inputs, &f, &GradCheckConfig::default());
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2), rand_mat(&mut rng, 3, 2), rand_mat(&mut rng, 1, 2)];
        assert_grads(ins, |g, v| {
            let m = g.matmul(v[0], v[1]);
            let a = g.mul(m, v[2]);
            let b = g.sub(a, v[2]);
            let c = g.add_row(b, v[3]);
            let d = g.mul_row(c, v[3]);
            let e = g.gelu(d);
            let f = g.matmul_nt(e, v[2]);
            g.sum_all(f)
        });
    }

    #[test]
    fn normalisation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = vec![rand_mat(&mut rng, 3, 5), rand_mat(&mut rng, 3, 5)];
        assert_grads(ins, |g, v| {
            let a = g.layer_norm(v[0]);
            let b = g.row_l2_normalize(v[1]);
            let c = g.mul(a, b);
            let d = g.log_softmax_rows(c);
            let e = g.logsumexp_rows(d);
            let t = Rc::new(Mat::from_vec(3, 5, (0..15).map(|i| (i % 2) as f64).collect()));
            let f = g.sigmoid_bce(c, t);
            let s1 = g.sum_all(e);
            let s2 = g.mean_all(f);
            let s = g.add(s1, s2);
            g.scale(s, 0.5)
        });
    }

    #[test]
    fn gather_concat_reshape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![rand_mat(&mut rng, 2, 3), rand_mat(&mut rng, 1, 3)];
        assert_grads(ins, |g, v| {
            let c = g.concat_rows(&[v[1], v[0]]);
            let r = g.reshape(c, 1, 9);
            let idx = Rc::new(vec![0, 4, GATHER_ZERO, 8, 4, 2]);
            let s = g.gather(r, idx, 2, 3);
            let sq = g.mul(s, s);
            let rows = g.select_rows(sq, &[1, 1, 0]);
            g.sum_all(rows)
        });
    }

    #[test]
    fn attention_gradients_and_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = vec![rand_mat(&mut rng, 5, 4), rand_mat(&mut rng, 4, 4), rand_mat(&mut rng, 4, 4)];
        let qseg = Rc::new(vec![(0, 2), (2, 3)]);
        let kseg = Rc::new(vec![(0, 3), (3, 1)]);
        let f = |g: &mut Graph, v: &[Var]| {
            let a = g.attention(v[0], v[1], v[2], 2, qseg.clone(), kseg.clone());
            let sq = g.mul(a, a);
            g.sum_all(sq)
        };
        assert_grads(ins.clone(), f);
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.into_iter().map(|m| g.constant(m)).collect();
        let a = g.attention(vs[0], vs[1], vs[2], 2, qseg.clone(), kseg.clone());
        for p in g.attention_probs(a) {
            for i in 0..p.rows() {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logsumexp_skips_masked_entries() {
        let v = logsumexp(&[0.0, f64::NEG_INFINITY, 0.0]);
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Mat::filled(1, 1, 2.0));
        let p = g.param(0, &Mat::filled(1, 1, 3.0));
        let m = g.mul(c, p);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert!(grads.of(c).is_none());
        assert_eq!(grads.param(0).unwrap().get(0, 0), 2.0);
    }
}
