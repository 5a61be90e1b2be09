//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records operations eagerly: every call computes its output
//! immediately and appends a node. [`Graph::backward`] then walks the nodes in
//! reverse and returns gradients for every parameter leaf that was registered
//! as trainable. Frozen parameters are borrowed rather than copied, and no
//! gradient buffer is ever allocated for them, which keeps inference and
//! prompt tuning cheap.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap, HashSet};

use crate::tensor::{matmul, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Which named parameters receive gradients.
#[derive(Clone, Debug, Default)]
pub enum GradPolicy {
    /// Inference: nothing is differentiated.
    #[default]
    None,
    All,
    Only(HashSet<String>),
}

impl GradPolicy {
    fn wants(&self, name: &str) -> bool {
        match self {
            GradPolicy::None => false,
            GradPolicy::All => true,
            GradPolicy::Only(set) => set.contains(name),
        }
    }
}

/// Shape of a fused multi-head self-attention call: `batch` independent
/// sequences of length `seq`, stacked row-wise.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
    /// Per-row key validity (`batch * seq`); `None` means all keys valid.
    pub key_valid: Option<Vec<bool>>,
}

enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    MulScalar(NodeId, NodeId),
    Exp(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor<T>, rstd: Vec<T> },
    Gelu(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, spec: AttnSpec, probs: Vec<T> },
    Gather { src: NodeId, idx: Vec<usize> },
    ReplaceRows { x: NodeId, idx: Vec<usize>, src: NodeId },
    MeanGroups { x: NodeId, group: usize },
    L2Normalize { x: NodeId, norms: Vec<T> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Vec<T>, probs: Tensor<T> },
    Transpose(NodeId),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    params: HashMap<String, NodeId>,
    policy: GradPolicy,
}

const LN_EPS: f64 = 1e-5;

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(policy: GradPolicy) -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            policy,
        }
    }

    pub fn inference() -> Self {
        Self::new(GradPolicy::None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a named parameter. Repeated registrations of the same name
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, name: &str, value: &'a Tensor<T>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let needs_grad = self.policy.wants(name);
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_ex(a, false, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_ex(a, false, b, true)
    }

    pub fn matmul_ex(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> NodeId {
        let out = matmul(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shapes");
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(self.nodes[row.0].value.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let s = T::of(s);
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s).item();
        let mut out = self.value(a).clone();
        out.scale_in_place(sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::MulScalar(a, s), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            *x = x.exp();
        }
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = T::of(cols as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for j in 0..cols {
                xh[j] = (row[j] - mean) * r;
            }
            let o = out.row_mut(i);
            for j in 0..cols {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            *x = gelu(*x);
        }
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Fused scaled-dot-product multi-head attention over stacked sequences.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, spec: AttnSpec) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        assert_eq!(qv.rows(), spec.batch * spec.seq, "attention rows");
        assert_eq!(width % spec.heads, 0, "width divisible by heads");
        let dh = width / spec.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let l = spec.seq;
        let mut probs = vec![T::zero(); spec.batch * spec.heads * l * l];
        let mut out = Tensor::zeros(qv.rows(), width);
        let mut scores = vec![T::zero(); l];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let c0 = h * dh;
                for i in 0..l {
                    let qi = &qv.row(b * l + i)[c0..c0 + dh];
                    let mut max = T::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate() {
                        if attn_masked(&spec, b, i, j) {
                            *s = T::neg_infinity();
                            continue;
                        }
                        let kj = &kv.row(b * l + j)[c0..c0 + dh];
                        *s = crate::tensor::dot(qi, kj) * scale;
                        if *s > max {
                            max = *s;
                        }
                    }
                    let p = &mut probs[((b * spec.heads + h) * l + i) * l..][..l];
                    let mut z = T::zero();
                    for j in 0..l {
                        p[j] = if scores[j] == T::neg_infinity() {
                            T::zero()
                        } else {
                            (scores[j] - max).exp()
                        };
                        z += p[j];
                    }
                    let o = &mut out.row_mut(b * l + i)[c0..c0 + dh];
                    for j in 0..l {
                        p[j] /= z;
                        if p[j] == T::zero() {
                            continue;
                        }
                        let vj = &vv.row(b * l + j)[c0..c0 + dh];
                        for d in 0..dh {
                            o[d] += p[j] * vj[d];
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, spec, probs }, ng)
    }

    /// Row lookup: `out[i] = src[idx[i]]`. Serves both embedding tables and
    /// row selection.
    pub fn gather(&mut self, src: NodeId, idx: &[usize]) -> NodeId {
        let s = self.value(src);
        let mut data = Vec::with_capacity(idx.len() * s.cols());
        for &i in idx {
            data.extend_from_slice(s.row(i));
        }
        let out = Tensor::from_vec(idx.len(), s.cols(), data).expect("gather shape");
        let ng = self.ng(src);
        self.push(out, Op::Gather { src, idx: idx.to_vec() }, ng)
    }

    /// Copy of `x` whose rows `idx[r]` are overwritten by row `r` of `src`.
    pub fn replace_rows(&mut self, x: NodeId, idx: &[usize], src: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let s = self.value(src);
        assert_eq!(s.rows(), idx.len(), "replace_rows count");
        assert_eq!(s.cols(), out.cols(), "replace_rows width");
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(s.row(r));
        }
        let ng = self.ng(x) || self.ng(src);
        self.push(out, Op::ReplaceRows { x, idx: idx.to_vec(), src }, ng)
    }

    /// Means over consecutive groups of `group` rows.
    pub fn mean_groups(&mut self, x: NodeId, group: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rows() % group, 0, "mean_groups divisibility");
        let n = xv.rows() / group;
        let inv = T::of(1.0 / group as f64);
        let mut out = Tensor::zeros(n, xv.cols());
        for g in 0..n {
            for r in 0..group {
                let src = xv.row(g * group + r);
                for (o, &v) in out.row_mut(g).iter_mut().zip(src) {
                    *o += v;
                }
            }
            for o in out.row_mut(g) {
                *o *= inv;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MeanGroups { x, group }, ng)
    }

    /// Divides each row by its Euclidean norm. Callers are responsible for
    /// rejecting degenerate rows.
    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let norms = xv.row_norms();
        let mut out = xv.clone();
        for (i, &n) in norms.iter().enumerate() {
            for v in out.row_mut(i) {
                *v /= n;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    /// Weighted mean over rows of `-log softmax(logits[i])[targets[i]]`.
    /// Rows with weight zero do not contribute.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[T]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows());
        assert_eq!(weights.len(), lv.rows());
        let total: T = weights.iter().copied().sum();
        assert!(total > T::zero(), "cross_entropy needs a positive weight");
        let probs = softmax_rows(lv);
        let mut loss = T::zero();
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == T::zero() {
                continue;
            }
            loss += w * neg_log_softmax_at(lv.row(i), t);
        }
        let out = Tensor::scalar(loss / total);
        let ng = self.ng(logits);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Gradients of the scalar node `loss` with respect to every trainable
    /// parameter that influenced it.
    pub fn backward(&self, loss: NodeId) -> BTreeMap<String, Tensor<T>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(gout);
                continue;
            }
            self.backprop_node(id, &gout, &mut grads);
        }
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            if self.nodes[id.0].needs_grad {
                let g = grads[id.0]
                    .take()
                    .unwrap_or_else(|| {
                        let (r, c) = self.value(*id).shape();
                        Tensor::zeros(r, c)
                    });
                out.insert(name.clone(), g);
            }
        }
        out
    }

    fn backprop_node(&self, id: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    // C = op(A) op(B); dA = dC op(B)^T (transposed back if ta).
                    let ga = if *ta {
                        matmul(bv, *tb, gout, true)
                    } else {
                        matmul(gout, false, bv, !*tb)
                    };
                    accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = if *tb {
                        matmul(gout, true, av, *ta)
                    } else {
                        matmul(av, !*ta, gout, false)
                    };
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, gout.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if self.ng(*row) {
                    let mut g = Tensor::zeros(1, gout.cols());
                    for i in 0..gout.rows() {
                        for (s, &v) in g.data_mut().iter_mut().zip(gout.row(i)) {
                            *s += v;
                        }
                    }
                    accumulate(grads, *row, g);
                }
            }
            Op::Scale(a, s) => {
                let mut g = gout.clone();
                g.scale_in_place(*s);
                accumulate(grads, *a, g);
            }
            Op::MulScalar(a, s) => {
                if self.ng(*a) {
                    let mut g = gout.clone();
                    g.scale_in_place(self.value(*s).item());
                    accumulate(grads, *a, g);
                }
                if self.ng(*s) {
                    let d = crate::tensor::dot(gout.data(), self.value(*a).data());
                    accumulate(grads, *s, Tensor::scalar(d));
                }
            }
            Op::Exp(a) => {
                let mut g = gout.clone();
                for (x, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *x *= y;
                }
                accumulate(grads, *a, g);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, cols) = gout.shape();
                let gv = self.value(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    for i in 0..rows {
                        let (go, xh) = (gout.row(i), xhat.row(i));
                        for j in 0..cols {
                            dg.data_mut()[j] += go[j] * xh[j];
                            db.data_mut()[j] += go[j];
                        }
                    }
                    if self.ng(*gamma) {
                        accumulate(grads, *gamma, dg);
                    }
                    if self.ng(*beta) {
                        accumulate(grads, *beta, db);
                    }
                }
                if self.ng(*x) {
                    let n = T::of(cols as f64);
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dxh = vec![T::zero(); cols];
                    for i in 0..rows {
                        let (go, xh) = (gout.row(i), xhat.row(i));
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..cols {
                            dxh[j] = go[j] * gv[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xh[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        let r = rstd[i];
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = r * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(a) => {
                let mut g = gout.clone();
                for (d, &x) in g.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *d *= gelu_grad(x);
                }
                accumulate(grads, *a, g);
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, gout, grads);
            }
            Op::Gather { src, idx } => {
                let (r, c) = self.value(*src).shape();
                let mut g = Tensor::zeros(r, c);
                for (row, &i) in idx.iter().enumerate() {
                    for (d, &v) in g.row_mut(i).iter_mut().zip(gout.row(row)) {
                        *d += v;
                    }
                }
                accumulate(grads, *src, g);
            }
            Op::ReplaceRows { x, idx, src } => {
                if self.ng(*x) {
                    let mut g = gout.clone();
                    for &i in idx {
                        g.row_mut(i).iter_mut().for_each(|v| *v = T::zero());
                    }
                    accumulate(grads, *x, g);
                }
                if self.ng(*src) {
                    let mut g = Tensor::zeros(idx.len(), gout.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        g.row_mut(r).copy_from_slice(gout.row(i));
                    }
                    accumulate(grads, *src, g);
                }
            }
            Op::MeanGroups { x, group } => {
                let (r, c) = self.value(*x).shape();
                let inv = T::of(1.0 / *group as f64);
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    for (d, &v) in g.row_mut(i).iter_mut().zip(gout.row(i / group)) {
                        *d = v * inv;
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut g = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), gout.row(i));
                    let proj = crate::tensor::dot(yr, gr);
                    for (j, d) in g.row_mut(i).iter_mut().enumerate() {
                        *d = (gr[j] - yr[j] * proj) / norms[i];
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let total: T = weights.iter().copied().sum();
                let scale = gout.item() / total;
                let mut g = Tensor::zeros(probs.rows(), probs.cols());
                for i in 0..probs.rows() {
                    let w = weights[i];
                    if w == T::zero() {
                        continue;
                    }
                    let f = w * scale;
                    for (d, &p) in g.row_mut(i).iter_mut().zip(probs.row(i)) {
                        *d = p * f;
                    }
                    g.row_mut(i)[targets[i]] -= f;
                }
                accumulate(grads, *logits, g);
            }
            Op::Transpose(a) => accumulate(grads, *a, gout.transpose()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: &AttnSpec,
        probs: &[T],
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.shape();
        let dh = width / spec.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let l = spec.seq;
        let mut dq = Tensor::zeros(rows, width);
        let mut dk = Tensor::zeros(rows, width);
        let mut dv = Tensor::zeros(rows, width);
        let mut dp = vec![T::zero(); l];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let c0 = h * dh;
                for i in 0..l {
                    let p = &probs[((b * spec.heads + h) * l + i) * l..][..l];
                    let go = &gout.row(b * l + i)[c0..c0 + dh];
                    let mut acc = T::zero();
                    for j in 0..l {
                        if p[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &vv.row(b * l + j)[c0..c0 + dh];
                        dp[j] = crate::tensor::dot(go, vj);
                        acc += p[j] * dp[j];
                        let dvj = &mut dv.row_mut(b * l + j)[c0..c0 + dh];
                        for d in 0..dh {
                            dvj[d] += p[j] * go[d];
                        }
                    }
                    let qi: Vec<T> = qv.row(b * l + i)[c0..c0 + dh].to_vec();
                    for j in 0..l {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - acc) * scale;
                        let kj = &kv.row(b * l + j)[c0..c0 + dh];
                        let dqi = &mut dq.row_mut(b * l + i)[c0..c0 + dh];
                        for d in 0..dh {
                            dqi[d] += ds * kj[d];
                        }
                        let dkj = &mut dk.row_mut(b * l + j)[c0..c0 + dh];
                        for d in 0..dh {
                            dkj[d] += ds * qi[d];
                        }
                    }
                }
            }
        }
        if self.ng(q) {
            accumulate(grads, q, dq);
        }
        if self.ng(k) {
            accumulate(grads, k, dk);
        }
        if self.ng(v) {
            accumulate(grads, v, dv);
        }
    }
}

fn attn_masked(spec: &AttnSpec, b: usize, i: usize, j: usize) -> bool {
    if spec.causal && j > i {
        return true;
    }
    match &spec.key_valid {
        Some(valid) => !valid[b * spec.seq + j],
        None => false,
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Row-wise numerically stabilized softmax.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// `-log softmax(row)[target]` via log-sum-exp with max subtraction.
pub fn neg_log_softmax_at<T: Scalar>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    lse - row[target]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric_grad(
        f: &dyn Fn(&Tensor<f64>) -> f64,
        x: &Tensor<f64>,
        eps: f64,
    ) -> Tensor<f64> {
        let mut g = Tensor::zeros(x.rows(), x.cols());
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + eps;
            let fp = f(&xp);
            xp.data_mut()[i] = orig - eps;
            let fm = f(&xp);
            xp.data_mut()[i] = orig;
            g.data_mut()[i] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    fn check(build: &dyn for<'g> Fn(&mut Graph<'g, f64>, NodeId) -> NodeId, x: Tensor<f64>) {
        let eval = |t: &Tensor<f64>| {
            let mut g = Graph::inference();
            let id = g.constant(t.clone());
            let out = build(&mut g, id);
            g.value(out).item()
        };
        let mut g = Graph::new(GradPolicy::All);
        let id = g.param("x", &x);
        let out = build(&mut g, id);
        let analytic = g.backward(out).remove("x").unwrap();
        let numeric = numeric_grad(&eval, &x, 1e-5);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} numeric {n}");
        }
    }

    fn rand_t(r: usize, c: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn layer_norm_gelu_gradient() {
        let gamma = rand_t(1, 6, 2);
        let beta = rand_t(1, 6, 3);
        let w = rand_t(4, 6, 4);
        check(
            &|g, x| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let y = g.layer_norm(x, ga, be);
                let y = g.gelu(y);
                let wc = g.constant(w.clone());
                let t = g.transpose(wc);
                let p1 = g.matmul_ex(y, false, wc, true);
                let p2 = g.matmul(y, t);
                let p = g.add(p1, p2);
                g.cross_entropy(p, &[0, 1, 2, 3], &[1.0, 2.0, 0.0, 1.0])
            },
            rand_t(4, 6, 1),
        );
    }

    #[test]
    fn attention_gradient_causal_and_masked() {
        for causal in [false, true] {
            let key_valid = Some(vec![true, true, false, true, true, true]);
            check(
                &|g, x| {
                    let spec = AttnSpec {
                        batch: 2,
                        seq: 3,
                        heads: 2,
                        causal,
                        key_valid: key_valid.clone(),
                    };
                    let k = g.scale(x, 0.7);
                    let a = g.attention(x, k, x, spec);
                    let n = g.l2_normalize(a);
                    let m = g.mean_groups(n, 3);
                    let s = g.matmul_nt(m, m);
                    g.cross_entropy(s, &[0, 1], &[1.0, 1.0])
                },
                rand_t(6, 4, 7),
            );
        }
    }

    #[test]
    fn gather_replace_exp_gradient() {
        let src = rand_t(2, 3, 9);
        check(
            &|g, x| {
                let rows = g.gather(x, &[0, 2, 2, 1]);
                let s = g.constant(src.clone());
                let r = g.replace_rows(rows, &[1, 3], s);
                let t = g.constant(Tensor::scalar(0.3));
                let e = g.exp(t);
                let sc = g.mul_scalar(r, e);
                g.cross_entropy(sc, &[0, 1, 2, 0], &[1.0; 4])
            },
            rand_t(3, 3, 8),
        );
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let x = rand_t(2, 2, 1);
        let w = rand_t(2, 2, 2);
        let mut g = Graph::new(GradPolicy::Only(["w".to_string()].into()));
        let xi = g.param("x", &x);
        let wi = g.param("w", &w);
        let y = g.matmul(xi, wi);
        let loss = g.cross_entropy(y, &[0, 1], &[1.0, 1.0]);
        let grads = g.backward(loss);
        assert!(grads.contains_key("w"));
        assert!(!grads.contains_key("x"));
    }
}
