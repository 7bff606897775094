//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a `1 × 1` node walks the tape in reverse and
//! returns the gradient of that scalar with respect to every node that
//! depends on a trainable leaf.
//!
//! Attention is a single fused node: scores, masking, softmax and the
//! value mix are evaluated together and the softmax probabilities are kept
//! for the backward pass. The set of keys each query may see is described by
//! an [`AttnMask`].

use crate::tensor::Matrix;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys each query position may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Every query sees the keys flagged `true` (real, non-padding positions).
    KeyPadding(Vec<bool>),
    /// Query `i` sees keys `0..=i`. Only valid when queries and keys have the same length.
    Causal,
    /// Self-attention restricted to positions sharing a group id.
    Groups(Vec<usize>),
    /// Explicit visible-key list per query.
    Keys(Vec<Vec<usize>>),
}

impl AttnMask {
    /// Expands the mask into an explicit key list per query.
    pub fn key_sets(&self, n_queries: usize, n_keys: usize) -> Vec<Vec<usize>> {
        match self {
            AttnMask::Full => (0..n_queries).map(|_| (0..n_keys).collect()).collect(),
            AttnMask::KeyPadding(real) => {
                assert_eq!(real.len(), n_keys, "key padding mask length mismatch");
                let keys: Vec<usize> = (0..n_keys).filter(|&j| real[j]).collect();
                (0..n_queries).map(|_| keys.clone()).collect()
            }
            AttnMask::Causal => {
                assert_eq!(n_queries, n_keys, "causal mask needs square attention");
                (0..n_queries).map(|i| (0..=i).collect()).collect()
            }
            AttnMask::Groups(ids) => {
                assert_eq!(ids.len(), n_keys, "group mask length mismatch");
                assert_eq!(n_queries, n_keys, "group mask needs self-attention");
                let n_groups = ids.iter().copied().max().map_or(0, |m| m + 1);
                let mut members = vec![Vec::new(); n_groups];
                for (pos, &g) in ids.iter().enumerate() {
                    members[g].push(pos);
                }
                ids.iter().map(|&g| members[g].clone()).collect()
            }
            AttnMask::Keys(keys) => {
                assert_eq!(keys.len(), n_queries, "key list count mismatch");
                assert!(keys.iter().flatten().all(|&j| j < n_keys), "key index out of range");
                keys.clone()
            }
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Matrix),
    MulScalar(Var, Var),
    Exp(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, keys: Vec<Vec<usize>>, probs: Vec<f64>, offsets: Vec<usize> },
    SelectRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaskedMeanRows(Var, Vec<bool>),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    RowNorms(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of `xs` written into `out`.
pub fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Trainable input: gradients flow back to it.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch {:?} vs {:?}", x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Matrix::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `x + b` with `b` a `1 × cols` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xm, bm) = (self.value(x), self.value(b));
        assert_eq!(bm.shape(), (1, xm.cols()), "add_row expects a 1x{} row", xm.cols());
        let mut out = xm.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(bm.data()) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddRow(x, b), ng)
    }

    /// `x ⊙ g` with `g` a `1 × cols` row broadcast over every row of `x`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (xm, gm) = (self.value(x), self.value(g));
        assert_eq!(gm.shape(), (1, xm.cols()), "mul_row expects a 1x{} row", xm.cols());
        let mut out = xm.clone();
        for r in 0..out.rows() {
            for (o, &gv) in out.row_mut(r).iter_mut().zip(gm.data()) {
                *o *= gv;
            }
        }
        let ng = self.ng(x) || self.ng(g);
        self.push(out, Op::MulRow(x, g), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        let ng = self.ng(x);
        self.push(v, Op::AddConst(x), ng)
    }

    /// Elementwise product with a fixed matrix (dropout masks).
    pub fn mul_const(&mut self, x: Var, m: Matrix) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.shape(), m.shape(), "mul_const shape mismatch");
        let data = xm.data().iter().zip(m.data()).map(|(a, b)| a * b).collect();
        let v = Matrix::from_vec(xm.rows(), xm.cols(), data);
        let ng = self.ng(x);
        self.push(v, Op::MulConst(x, m), ng)
    }

    /// `x · s` where `s` is a `1 × 1` node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let v = self.value(x).map(|a| a * sv);
        let ng = self.ng(x) || self.ng(s);
        self.push(v, Op::MulScalar(x, s), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        let ng = self.ng(x);
        self.push(v, Op::Exp(x), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(v, Op::Transpose(x), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    /// Ramp function `max(x, 0)`.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    /// Row-wise layer normalisation with `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        assert_eq!(self.value(gain).shape(), (1, cols), "layer_norm gain shape");
        assert_eq!(self.value(bias).shape(), (1, cols), "layer_norm bias shape");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng)
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q: Lq × D`, `k, v: Lk × D`; `D` must be divisible by `heads`. Head `h`
    /// uses columns `h·D/heads .. (h+1)·D/heads`. A query with no visible key
    /// outputs zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qm.shape();
        let lk = km.rows();
        assert_eq!(km.cols(), d, "attention key width mismatch");
        assert_eq!(vm.shape(), (lk, d), "attention value shape mismatch");
        assert!(heads > 0 && d % heads == 0, "heads must divide the model width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let keys = mask.key_sets(lq, lk);
        let mut offsets = Vec::with_capacity(heads * lq + 1);
        let mut probs = Vec::new();
        let mut out = Matrix::zeros(lq, d);
        let mut scores = Vec::new();
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..lq {
                offsets.push(probs.len());
                let ks = &keys[i];
                if ks.is_empty() {
                    continue;
                }
                let qi = &qm.row(i)[cols.clone()];
                scores.clear();
                for &j in ks {
                    let kj = &km.row(j)[cols.clone()];
                    scores.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale);
                }
                let start = probs.len();
                probs.resize(start + ks.len(), 0.0);
                softmax_into(&scores, &mut probs[start..]);
                let orow = &mut out.row_mut(i)[cols.clone()];
                for (&p, &j) in probs[start..].iter().zip(ks) {
                    let vj = &vm.row(j)[cols.clone()];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        offsets.push(probs.len());
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, heads, keys, probs, offsets }, ng)
    }

    /// Gathers rows by index (indices may repeat).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xm = self.value(x);
        let cols = xm.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(xm.row(i));
        }
        let v = Matrix::from_vec(idx.len(), cols, data);
        let ng = self.ng(x);
        self.push(v, Op::SelectRows(x, idx.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pm.cols()].copy_from_slice(pm.row(r));
            }
            off += pm.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pm.data());
            rows += pm.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Mean over the rows flagged `true`; returns a `1 × cols` row.
    pub fn masked_mean_rows(&mut self, x: Var, keep: &[bool]) -> Var {
        let xm = self.value(x);
        assert_eq!(keep.len(), xm.rows(), "mean mask length mismatch");
        let count = keep.iter().filter(|&&k| k).count().max(1) as f64;
        let mut out = vec![0.0; xm.cols()];
        for r in (0..xm.rows()).filter(|&r| keep[r]) {
            for (o, &v) in out.iter_mut().zip(xm.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= count;
        }
        let ng = self.ng(x);
        self.push(Matrix::row_vector(out), Op::MaskedMeanRows(x, keep.to_vec()), ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let keep = vec![true; self.value(x).rows()];
        self.masked_mean_rows(x, &keep)
    }

    /// Scales every row to unit Euclidean norm. Panics on a zero row; callers
    /// validate inputs first.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let mut out = xm.clone();
        let mut norms = Vec::with_capacity(xm.rows());
        for r in 0..xm.rows() {
            let n = xm.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n > 0.0, "cannot normalise a zero-norm row");
            norms.push(n);
            for o in out.row_mut(r) {
                *o /= n;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, ng)
    }

    /// Euclidean norm of each row, as an `rows × 1` column.
    pub fn row_norms(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let data = (0..xm.rows()).map(|r| xm.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let v = Matrix::from_vec(xm.rows(), 1, data);
        let ng = self.ng(x);
        self.push(v, Op::RowNorms(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    /// Mean softmax cross-entropy over the rows whose target is `Some`.
    /// Returns 0 when no row has a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lm = self.value(logits);
        assert_eq!(targets.len(), lm.rows(), "one target per logits row");
        let mut probs = Matrix::zeros(lm.rows(), lm.cols());
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            softmax_into(lm.row(r), probs.row_mut(r));
            if let Some(t) = *t {
                assert!(t < lm.cols(), "target {t} out of range");
                let row = lm.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits);
        self.push(Matrix::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let g = zip(dy, bm, |d, y| d * y);
                    self.accumulate(grads, *a, g);
                }
                if self.ng(*b) {
                    let g = zip(dy, am, |d, x| d * x);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, dy.clone());
                if self.ng(*b) {
                    self.accumulate(grads, *b, col_sums(dy));
                }
            }
            Op::MulRow(x, g) => {
                let (xm, gm) = (self.value(*x), self.value(*g));
                if self.ng(*x) {
                    let mut dx = dy.clone();
                    for r in 0..dx.rows() {
                        for (o, &gv) in dx.row_mut(r).iter_mut().zip(gm.data()) {
                            *o *= gv;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.ng(*g) {
                    self.accumulate(grads, *g, col_sums(&zip(dy, xm, |d, v| d * v)));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, dy.map(|d| d * s)),
            Op::AddConst(x) => self.accumulate(grads, *x, dy.clone()),
            Op::MulConst(x, m) => self.accumulate(grads, *x, zip(dy, m, |d, v| d * v)),
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).item();
                if self.ng(*x) {
                    self.accumulate(grads, *x, dy.map(|d| d * sv));
                }
                if self.ng(*s) {
                    let total = zip(dy, self.value(*x), |d, v| d * v).sum();
                    self.accumulate(grads, *s, Matrix::scalar(total));
                }
            }
            Op::Exp(x) => self.accumulate(grads, *x, zip(dy, &node.value, |d, y| d * y)),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, dy.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(dy));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, dy.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, dy.t_matmul(self.value(*a)));
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, dy.transpose()),
            Op::Gelu(x) => self.accumulate(grads, *x, zip(dy, self.value(*x), |d, v| d * gelu_grad(v))),
            Op::Sigmoid(x) => self.accumulate(grads, *x, zip(dy, &node.value, |d, y| d * y * (1.0 - y))),
            Op::Relu(x) => self.accumulate(grads, *x, zip(dy, self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 })),
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gm = self.value(*gain);
                if self.ng(*gain) {
                    self.accumulate(grads, *gain, col_sums(&zip(dy, xhat, |d, h| d * h)));
                }
                if self.ng(*bias) {
                    self.accumulate(grads, *bias, col_sums(dy));
                }
                if self.ng(*x) {
                    let (rows, cols) = dy.shape();
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dyr = dy.row(r);
                        let hr = xhat.row(r);
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            let dh = dyr[c] * gm.data()[c];
                            s1 += dh;
                            s2 += dh * hr[c];
                        }
                        let is = inv_std[r];
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            let dh = dyr[c] * gm.data()[c];
                            *o = is / n * (n * dh - s1 - hr[c] * s2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention { q, k, v, heads, keys, probs, offsets } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let (lq, d) = qm.shape();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(lq, d);
                let mut dk = Matrix::zeros(km.rows(), d);
                let mut dv = Matrix::zeros(vm.rows(), d);
                let mut dp = Vec::new();
                for h in 0..*heads {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..lq {
                        let ks = &keys[i];
                        if ks.is_empty() {
                            continue;
                        }
                        let off = offsets[h * lq + i];
                        let p = &probs[off..off + ks.len()];
                        let dout = &dy.row(i)[cols.clone()];
                        dp.clear();
                        let mut dot = 0.0;
                        for (&pj, &j) in p.iter().zip(ks) {
                            let vj = &vm.row(j)[cols.clone()];
                            let g: f64 = dout.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dp.push(g);
                            dot += pj * g;
                            for (o, &dd) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dout) {
                                *o += pj * dd;
                            }
                        }
                        let qi = &qm.row(i)[cols.clone()];
                        for ((&pj, &j), &g) in p.iter().zip(ks).zip(&dp) {
                            let ds = pj * (g - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &km.row(j)[cols.clone()];
                            for (o, &kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                                *o += ds * kv;
                            }
                            for (o, &qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                                *o += ds * qv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::SelectRows(x, idx) => {
                if self.ng(*x) {
                    let xm = self.value(*x);
                    let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &d) in dx.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.ng(p) {
                        let mut g = Matrix::zeros(dy.rows(), cols);
                        for r in 0..dy.rows() {
                            g.row_mut(r).copy_from_slice(&dy.row(r)[off..off + cols]);
                        }
                        self.accumulate(grads, p, g);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.ng(p) {
                        let cols = dy.cols();
                        let g = Matrix::from_vec(rows, cols, dy.data()[off * cols..(off + rows) * cols].to_vec());
                        self.accumulate(grads, p, g);
                    }
                    off += rows;
                }
            }
            Op::MaskedMeanRows(x, keep) => {
                let xm = self.value(*x);
                let count = keep.iter().filter(|&&k| k).count().max(1) as f64;
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                for r in (0..xm.rows()).filter(|&r| keep[r]) {
                    for (o, &d) in dx.row_mut(r).iter_mut().zip(dy.data()) {
                        *o = d / count;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &dv) in dx.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *o = (dv - yv * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowNorms(x) => {
                let xm = self.value(*x);
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                for r in 0..xm.rows() {
                    let n = node.value.get(r, 0);
                    if n == 0.0 {
                        continue;
                    }
                    let d = dy.get(r, 0);
                    for (o, &v) in dx.row_mut(r).iter_mut().zip(xm.row(r)) {
                        *o = d * v / n;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Matrix::filled(r, c, dy.item()));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let count = targets.iter().filter(|t| t.is_some()).count();
                let mut dl = Matrix::zeros(probs.rows(), probs.cols());
                if count > 0 {
                    let s = dy.item() / count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for (o, &p) in dl.row_mut(r).iter_mut().zip(probs.row(r)) {
                                *o = p * s;
                            }
                            let cur = dl.get(r, t);
                            dl.set(r, t, cur - s);
                        }
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    Matrix::row_vector(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central finite differences of `build` with respect to every input entry.
    fn check(inputs: Vec<Matrix>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|m| g.leaf(m)).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (i, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
            for e in 0..m.data().len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, mm)| {
                            let mut mm = mm.clone();
                            if j == i {
                                mm.data_mut()[e] += delta;
                            }
                            g.leaf(mm)
                        })
                        .collect();
                    let l = build(&mut g, &vs);
                    g.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} entry {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Random projection to a scalar so every output entry matters.
    fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
        let (r, c) = g.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(random(&mut rng, r, c));
        let p = g.mul(x, w);
        g.sum(p)
    }

    #[test]
    fn elementwise_and_broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = vec![random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 1, 4)];
        check(ins, |g, v| {
            let a = g.add(v[0], v[1]);
            let b = g.mul(a, v[1]);
            let c = g.sub(b, v[0]);
            let d = g.add_row(c, v[2]);
            let e = g.mul_row(d, v[2]);
            let f = g.gelu(e);
            let s = g.sigmoid(f);
            let x = g.exp(s);
            let y = g.scale(x, 0.7);
            probe(g, y, 2)
        });
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 5), random(&mut rng, 2, 5)];
        check(ins, |g, v| {
            let a = g.matmul(v[0], v[1]);
            let b = g.matmul_t(a, v[2]);
            let c = g.transpose(b);
            probe(g, c, 4)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ins = vec![random(&mut rng, 3, 6), random(&mut rng, 1, 6), random(&mut rng, 1, 6)];
        check(ins, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            probe(g, y, 6)
        });
    }

    #[test]
    fn attention_gradients_under_every_mask() {
        let masks = [
            AttnMask::Full,
            AttnMask::Causal,
            AttnMask::KeyPadding(vec![true, true, false, true, true]),
            AttnMask::Groups(vec![0, 1, 0, 1, 2]),
            AttnMask::Keys(vec![vec![0, 2], vec![], vec![1, 2, 3], vec![4], vec![0]]),
        ];
        for (s, mask) in masks.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + s as u64);
            let ins = vec![random(&mut rng, 5, 4), random(&mut rng, 5, 4), random(&mut rng, 5, 4)];
            check(ins, |g, v| {
                let y = g.attention(v[0], v[1], v[2], 2, mask);
                probe(g, y, 7)
            });
        }
    }

    #[test]
    fn cross_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let ins = vec![random(&mut rng, 2, 6), random(&mut rng, 4, 6), random(&mut rng, 4, 6)];
        check(ins, |g, v| {
            let y = g.attention(v[0], v[1], v[2], 3, &AttnMask::Full);
            probe(g, y, 8)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let ins = vec![random(&mut rng, 4, 3), random(&mut rng, 4, 2), random(&mut rng, 2, 5)];
        check(ins, |g, v| {
            let a = g.select_rows(v[0], &[3, 0, 0, 2]);
            let b = g.concat_cols(&[a, v[1]]);
            let c = g.concat_rows(&[b, v[2]]);
            let m = g.masked_mean_rows(c, &[true, false, true, true, true, false]);
            let n = g.l2_normalize_rows(c);
            let rn = g.row_norms(n);
            let q = g.row_norms(c);
            let s1 = g.sum(q);
            let s2 = g.sum(rn);
            let t = probe(g, m, 9);
            let u = g.add(s1, s2);
            g.add(t, u)
        });
    }

    #[test]
    fn loss_style_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let ins = vec![random(&mut rng, 3, 5), Matrix::scalar(0.3)];
        check(ins, |g, v| {
            let e = g.exp(v[1]);
            let l = g.mul_scalar(v[0], e);
            let ce = g.cross_entropy(l, &[Some(1), None, Some(4)]);
            let r = g.add_const(ce, -0.1);
            let r = g.relu(r);
            let mask = Matrix::from_vec(3, 5, (0..15).map(|i| (i % 2) as f64).collect());
            let m = g.mul_const(v[0], mask);
            let p = probe(g, m, 11);
            g.add(r, p)
        });
    }

    #[test]
    fn key_padding_hides_masked_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let x = random(&mut rng, 4, 4);
        let mask = AttnMask::KeyPadding(vec![true, true, true, false]);
        let run = |x: Matrix| {
            let mut g = Graph::new();
            let v = g.constant(x);
            let y = g.attention(v, v, v, 2, &mask);
            g.value(y).clone()
        };
        let base = run(x.clone());
        let mut perturbed = x;
        for c in 0..4 {
            perturbed.set(3, c, 100.0);
        }
        let after = run(perturbed);
        for r in 0..3 {
            assert_eq!(base.row(r), after.row(r));
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::scalar(2.0));
        let b = g.leaf(Matrix::scalar(3.0));
        let c = g.mul(a, b);
        let grads = g.backward(c);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
    }
}
