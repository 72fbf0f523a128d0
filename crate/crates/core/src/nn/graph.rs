//! Tape-based reverse-mode autodiff over dense row-major matrices.
//!
//! A [`Graph`] borrows a [`ParamStore`], records every operation in creation
//! order, and [`Graph::backward`] walks the tape in reverse. Parameter values are
//! read straight from the store, so forward-only graphs never copy weights.

use super::params::{Gradients, ParamId, ParamStore};
use super::scalar::{gemm, View, ViewMut};
use super::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    RepeatRows(NodeId, usize),
    Scale(NodeId, T),
    Gelu(NodeId),
    Silu(NodeId),
    Exp(NodeId),
    Clamp(NodeId, T, T),
    LayerNorm { x: NodeId, inv_std: Vec<T> },
    Attention(Box<AttentionRecord<T>>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    MeanRows { x: NodeId, seg: usize },
    Transpose(NodeId),
    Sum(NodeId),
    MseLoss { x: NodeId, target: Vec<T> },
    L2NormalizeRows { x: NodeId, norms: Vec<T> },
    CrossEntropyDiag { x: NodeId, probs: Vec<T> },
}

/// Softmax weights kept from an attention forward pass.
pub struct AttentionRecord<T> {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    pub heads: usize,
    /// Query rows per independent group.
    pub q_seg: usize,
    /// Key rows per independent group.
    pub kv_seg: usize,
    /// `[group][head][q_row][kv_row]`, flattened.
    pub probs: Vec<T>,
}

impl<T: Real> AttentionRecord<T> {
    pub fn groups(&self) -> usize {
        self.probs.len() / (self.heads * self.q_seg * self.kv_seg).max(1)
    }

    /// Weight from query `qi` to key `ki` of one group and head.
    pub fn weight(&self, group: usize, head: usize, qi: usize, ki: usize) -> T {
        self.probs[((group * self.heads + head) * self.q_seg + qi) * self.kv_seg + ki]
    }
}

struct Node<T> {
    value: Option<Tensor<T>>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
    track: bool,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-8;

impl<'p, T: Real> Graph<'p, T> {
    /// Graph that records gradients for parameters of `store`.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            track: true,
        }
    }

    /// Forward-only graph; `backward` yields empty gradients.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        match &self.nodes[id.0].op {
            Op::Param(p) => self.store.get(*p),
            _ => {
                &self.nodes[id.0]
                    .value
                    .as_ref()
                    .expect("non-parameter node owns its value")
                    .data
            }
        }
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        let (r, c) = self.shape(id);
        Tensor::from_vec(r, c, self.value(id).to_vec())
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node is not a scalar");
        v[0]
    }

    /// Attention weights recorded by an [`Graph::attention`] node.
    pub fn attention_record(&self, id: NodeId) -> Option<&AttentionRecord<T>> {
        match &self.nodes[id.0].op {
            Op::Attention(rec) => Some(rec),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        let (rows, cols) = value.shape();
        self.nodes.push(Node {
            value: Some(value),
            rows,
            cols,
            op,
            needs_grad: needs_grad && self.track,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let (rows, cols) = self.store.shape(id);
        self.nodes.push(Node {
            value: None,
            rows,
            cols,
            op: Op::Param(id),
            needs_grad: self.track,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul shape mismatch ({m}x{k}) @ ({k2}x{n})");
        let mut out = Tensor::zeros(m, n);
        gemm(
            T::one(),
            View::dense(self.value(a), m, k),
            View::dense(self.value(b), k, n),
            T::zero(),
            ViewMut::dense(&mut out.data, m, n),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(r, c, data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip_same(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip_same(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip_same(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a + row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let rv = self.value(row);
        let mut data = self.value(a).to_vec();
        for chunk in data.chunks_mut(c) {
            chunk.iter_mut().zip(rv).for_each(|(x, &y)| *x += y);
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(Tensor::from_vec(r, c, data), Op::AddRow(a, row), ng)
    }

    /// `a * row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects a 1x{c} row");
        let rv = self.value(row);
        let mut data = self.value(a).to_vec();
        for chunk in data.chunks_mut(c) {
            chunk.iter_mut().zip(rv).for_each(|(x, &y)| *x *= y);
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(Tensor::from_vec(r, c, data), Op::MulRow(a, row), ng)
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * c * times);
        for i in 0..r {
            for _ in 0..times {
                data.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec(r * times, c, data),
            Op::RepeatRows(a, times),
            ng,
        )
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let s = T::from_f64_lossy(s);
        let (r, c) = self.shape(a);
        let data = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(r, c, data), Op::Scale(a, s), ng)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(T) -> T) -> Tensor<T> {
        let (r, c) = self.shape(a);
        Tensor::from_vec(r, c, self.value(a).iter().map(|&x| f(x)).collect())
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.unary(a, gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let out = self.unary(a, |x| x / (T::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.unary(a, T::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let (lo, hi) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        let out = self.unary(a, |x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let eps = T::from_f64_lossy(LN_EPS);
        let n = T::from_usize(c).expect("usize fits");
        let mut data = self.value(a).to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in data.chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec(r, c, data),
            Op::LayerNorm { x: a, inv_std },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// Rows of `q` are split into consecutive groups of `q_seg`, rows of `k`/`v`
    /// into groups of `kv_seg`; group `g` of the queries attends only to group `g`
    /// of the keys. Columns are split evenly across `heads`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        q_seg: usize,
        kv_seg: usize,
    ) -> NodeId {
        let (nq, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        assert_eq!(self.shape(v), (nk, d), "attention value shape");
        assert_eq!(d, dk, "attention key width");
        assert!(
            heads >= 1 && d % heads == 0,
            "width {d} not divisible by {heads} heads"
        );
        assert!(q_seg >= 1 && kv_seg >= 1, "empty attention segment");
        assert_eq!(nq % q_seg, 0, "query rows not a multiple of the segment");
        let groups = nq / q_seg;
        assert_eq!(nk, groups * kv_seg, "key rows do not match query groups");
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); groups * heads * q_seg * kv_seg];
        let mut out = Tensor::zeros(nq, d);
        for g in 0..groups {
            for h in 0..heads {
                let base = (g * heads + h) * q_seg * kv_seg;
                let p = &mut probs[base..base + q_seg * kv_seg];
                gemm(
                    scale,
                    View::block(qv, d, g * q_seg, q_seg, h * dh, dh),
                    View::block(kv, d, g * kv_seg, kv_seg, h * dh, dh).t(),
                    T::zero(),
                    ViewMut::dense(p, q_seg, kv_seg),
                );
                for row in p.chunks_mut(kv_seg) {
                    softmax_in_place(row);
                }
                gemm(
                    T::one(),
                    View::dense(p, q_seg, kv_seg),
                    View::block(vv, d, g * kv_seg, kv_seg, h * dh, dh),
                    T::zero(),
                    ViewMut::block(&mut out.data, d, g * q_seg, q_seg, h * dh, dh),
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let rec = AttentionRecord {
            q,
            k,
            v,
            heads,
            q_seg,
            kv_seg,
            probs,
        };
        self.push(out, Op::Attention(Box::new(rec)), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows width mismatch");
            data.extend_from_slice(self.value(p));
            rows += r;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::from_vec(rows, c, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "slice_rows out of range");
        let data = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(len, c, data), Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(r, len, data), Op::SliceCols(a, start), ng)
    }

    /// Mean over consecutive groups of `seg` rows; `seg == rows` pools everything.
    pub fn mean_rows(&mut self, a: NodeId, seg: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(
            seg >= 1 && r % seg == 0,
            "mean_rows segment does not divide rows"
        );
        let inv = T::one() / T::from_usize(seg).expect("usize fits");
        let src = self.value(a);
        let mut data = vec![T::zero(); (r / seg) * c];
        for i in 0..r {
            let g = i / seg;
            for j in 0..c {
                data[g * c + j] += src[i * c + j] * inv;
            }
        }
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec(r / seg, c, data),
            Op::MeanRows { x: a, seg },
            ng,
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(c, r, data), Op::Transpose(a), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().copied().sum::<T>();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, a: NodeId, target: &[T]) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.len(), target.len(), "mse target length");
        let n = T::from_usize(v.len().max(1)).expect("usize fits");
        let loss = v
            .iter()
            .zip(target)
            .map(|(&x, &t)| (x - t) * (x - t))
            .sum::<T>()
            / n;
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::MseLoss {
                x: a,
                target: target.to_vec(),
            },
            ng,
        )
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let eps = T::from_f64_lossy(NORM_EPS);
        let mut data = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec(r, c, data),
            Op::L2NormalizeRows { x: a, norms },
            ng,
        )
    }

    /// Mean over rows of `-log softmax(row_i)[i]` for a square logit matrix.
    pub fn cross_entropy_diag(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(r, c, "cross_entropy_diag expects square logits");
        let mut probs = self.value(a).to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            softmax_in_place(row);
            loss -= row[i].max(T::min_positive_value()).ln();
        }
        loss /= T::from_usize(r.max(1)).expect("usize fits");
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::CrossEntropyDiag { x: a, probs },
            ng,
        )
    }

    /// Reverse pass from a scalar node; returns parameter gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        let mut out = Gradients::empty(self.store.len());
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        if !self.ng(loss) {
            return out;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(p) = node.op {
                out.grads[p.0] = Some(gy);
                continue;
            }
            self.backprop_node(i, &gy, &mut grads);
        }
        out
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node
            .value
            .as_ref()
            .map(|t| t.data.as_slice())
            .unwrap_or(&[]);
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.ng(*a) {
                    let ga = self.grad_buf(grads, *a);
                    gemm(
                        T::one(),
                        View::dense(gy, m, n),
                        View::dense(self.value(*b), k, n).t(),
                        T::one(),
                        ViewMut::dense(ga, m, k),
                    );
                }
                if self.ng(*b) {
                    let gb = self.grad_buf(grads, *b);
                    gemm(
                        T::one(),
                        View::dense(self.value(*a), m, k).t(),
                        View::dense(gy, m, n),
                        T::one(),
                        ViewMut::dense(gb, k, n),
                    );
                }
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |g| {
                    g.iter_mut().zip(gy).for_each(|(x, &d)| *x += d)
                });
                self.acc_with(grads, *b, |g| {
                    g.iter_mut().zip(gy).for_each(|(x, &d)| *x += d)
                });
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, |g| {
                    g.iter_mut().zip(gy).for_each(|(x, &d)| *x += d)
                });
                self.acc_with(grads, *b, |g| {
                    g.iter_mut().zip(gy).for_each(|(x, &d)| *x -= d)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, |g| {
                    for ((x, &d), &o) in g.iter_mut().zip(gy).zip(bv) {
                        *x += d * o;
                    }
                });
                self.acc_with(grads, *b, |g| {
                    for ((x, &d), &o) in g.iter_mut().zip(gy).zip(av) {
                        *x += d * o;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.acc_with(grads, *a, |g| {
                    g.iter_mut().zip(gy).for_each(|(x, &d)| *x += d)
                });
                self.acc_with(grads, *row, |g| {
                    for chunk in gy.chunks(cols) {
                        g.iter_mut().zip(chunk).for_each(|(x, &d)| *x += d);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                self.acc_with(grads, *a, |g| {
                    for (gc, dc) in g.chunks_mut(cols).zip(gy.chunks(cols)) {
                        for ((x, &d), &s) in gc.iter_mut().zip(dc).zip(rv) {
                            *x += d * s;
                        }
                    }
                });
                self.acc_with(grads, *row, |g| {
                    for (ac, dc) in av.chunks(cols).zip(gy.chunks(cols)) {
                        for ((x, &d), &v) in g.iter_mut().zip(dc).zip(ac) {
                            *x += d * v;
                        }
                    }
                });
            }
            Op::RepeatRows(a, times) => {
                self.acc_with(grads, *a, |g| {
                    for (r, dc) in gy.chunks(cols).enumerate() {
                        let src = r / times;
                        g[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(dc)
                            .for_each(|(x, &d)| *x += d);
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc_with(grads, *a, |g| {
                    g.iter_mut().zip(gy).for_each(|(x, &d)| *x += d * *s)
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, |g| {
                    for ((x, &d), &v) in g.iter_mut().zip(gy).zip(av) {
                        *x += d * gelu_grad(v);
                    }
                });
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, |g| {
                    for ((x, &d), &v) in g.iter_mut().zip(gy).zip(av) {
                        let s = T::one() / (T::one() + (-v).exp());
                        *x += d * (s + v * s * (T::one() - s));
                    }
                });
            }
            Op::Exp(a) => {
                self.acc_with(grads, *a, |g| {
                    for ((x, &d), &o) in g.iter_mut().zip(gy).zip(y) {
                        *x += d * o;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, |g| {
                    for ((x, &d), &v) in g.iter_mut().zip(gy).zip(av) {
                        if v >= *lo && v <= *hi {
                            *x += d;
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let n = T::from_usize(cols).expect("usize fits");
                self.acc_with(grads, *x, |g| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let dr = &gy[r * cols..(r + 1) * cols];
                        let mean_d = dr.iter().copied().sum::<T>() / n;
                        let mean_dy = dr.iter().zip(yr).map(|(&d, &v)| d * v).sum::<T>() / n;
                        for ((gx, &d), &v) in g[r * cols..(r + 1) * cols].iter_mut().zip(dr).zip(yr)
                        {
                            *gx += inv_std[r] * (d - mean_d - v * mean_dy);
                        }
                    }
                });
            }
            Op::Attention(rec) => self.backprop_attention(rec, gy, cols, grads),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, _) = self.shape(p);
                    let slice = &gy[offset * cols..(offset + pr) * cols];
                    self.acc_with(grads, p, |g| {
                        g.iter_mut().zip(slice).for_each(|(x, &d)| *x += d)
                    });
                    offset += pr;
                }
            }
            Op::SliceRows(a, start) => {
                let start = *start;
                self.acc_with(grads, *a, |g| {
                    g[start * cols..(start + rows) * cols]
                        .iter_mut()
                        .zip(gy)
                        .for_each(|(x, &d)| *x += d);
                });
            }
            Op::SliceCols(a, start) => {
                let (_, ac) = self.shape(*a);
                let start = *start;
                self.acc_with(grads, *a, |g| {
                    for r in 0..rows {
                        g[r * ac + start..r * ac + start + cols]
                            .iter_mut()
                            .zip(&gy[r * cols..(r + 1) * cols])
                            .for_each(|(x, &d)| *x += d);
                    }
                });
            }
            Op::MeanRows { x, seg } => {
                let inv = T::one() / T::from_usize(*seg).expect("usize fits");
                let (xr, _) = self.shape(*x);
                self.acc_with(grads, *x, |g| {
                    for r in 0..xr {
                        let grp = r / seg;
                        for j in 0..cols {
                            g[r * cols + j] += gy[grp * cols + j] * inv;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                self.acc_with(grads, *a, |g| {
                    // y is rows x cols; a is cols x rows
                    for i in 0..rows {
                        for j in 0..cols {
                            g[j * rows + i] += gy[i * cols + j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let d = gy[0];
                self.acc_with(grads, *a, |g| g.iter_mut().for_each(|x| *x += d));
            }
            Op::MseLoss { x, target } => {
                let xv = self.value(*x);
                let s = gy[0] * T::from_f64_lossy(2.0)
                    / T::from_usize(xv.len().max(1)).expect("usize fits");
                self.acc_with(grads, *x, |g| {
                    for ((gx, &v), &t) in g.iter_mut().zip(xv).zip(target) {
                        *gx += s * (v - t);
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                self.acc_with(grads, *x, |g| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let dr = &gy[r * cols..(r + 1) * cols];
                        let dot = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>();
                        for ((gx, &d), &v) in g[r * cols..(r + 1) * cols].iter_mut().zip(dr).zip(yr)
                        {
                            *gx += (d - v * dot) / norms[r];
                        }
                    }
                });
            }
            Op::CrossEntropyDiag { x, probs } => {
                let (n, _) = self.shape(*x);
                let s = gy[0] / T::from_usize(n.max(1)).expect("usize fits");
                self.acc_with(grads, *x, |g| {
                    for r in 0..n {
                        for c in 0..n {
                            let target = if r == c { T::one() } else { T::zero() };
                            g[r * n + c] += s * (probs[r * n + c] - target);
                        }
                    }
                });
            }
        }
    }

    fn backprop_attention(
        &self,
        rec: &AttentionRecord<T>,
        gy: &[T],
        d: usize,
        grads: &mut [Option<Vec<T>>],
    ) {
        let (heads, q_seg, kv_seg) = (rec.heads, rec.q_seg, rec.kv_seg);
        let dh = d / heads;
        let groups = rec.groups();
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(rec.q), self.value(rec.k), self.value(rec.v));
        let (nq, nk) = (groups * q_seg, groups * kv_seg);
        let mut gq = vec![T::zero(); nq * d];
        let mut gk = vec![T::zero(); nk * d];
        let mut gv = vec![T::zero(); nk * d];
        let mut dp = vec![T::zero(); q_seg * kv_seg];
        for g in 0..groups {
            for h in 0..heads {
                let base = (g * heads + h) * q_seg * kv_seg;
                let p = &rec.probs[base..base + q_seg * kv_seg];
                let go = View::block(gy, d, g * q_seg, q_seg, h * dh, dh);
                // dV = P^T dO
                gemm(
                    T::one(),
                    View::dense(p, q_seg, kv_seg).t(),
                    go,
                    T::one(),
                    ViewMut::block(&mut gv, d, g * kv_seg, kv_seg, h * dh, dh),
                );
                // dP = dO V^T
                gemm(
                    T::one(),
                    go,
                    View::block(vv, d, g * kv_seg, kv_seg, h * dh, dh).t(),
                    T::zero(),
                    ViewMut::dense(&mut dp, q_seg, kv_seg),
                );
                // dS = P * (dP - rowsum(dP * P))
                for (dr, pr) in dp.chunks_mut(kv_seg).zip(p.chunks(kv_seg)) {
                    let dot = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                    for (x, &pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot);
                    }
                }
                gemm(
                    scale,
                    View::dense(&dp, q_seg, kv_seg),
                    View::block(kv, d, g * kv_seg, kv_seg, h * dh, dh),
                    T::one(),
                    ViewMut::block(&mut gq, d, g * q_seg, q_seg, h * dh, dh),
                );
                gemm(
                    scale,
                    View::dense(&dp, q_seg, kv_seg).t(),
                    View::block(qv, d, g * q_seg, q_seg, h * dh, dh),
                    T::one(),
                    ViewMut::block(&mut gk, d, g * kv_seg, kv_seg, h * dh, dh),
                );
            }
        }
        for (id, src) in [(rec.q, gq), (rec.k, gk), (rec.v, gv)] {
            self.acc_with(grads, id, |g| {
                g.iter_mut().zip(&src).for_each(|(x, &s)| *x += s)
            });
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> &'g mut [T] {
        let n = {
            let node = &self.nodes[id.0];
            node.rows * node.cols
        };
        grads[id.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], id: NodeId, f: impl FnOnce(&mut [T])) {
        if self.ng(id) {
            f(self.grad_buf(grads, id));
        }
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every parameter coordinate of a tiny graph.
    fn check(build: impl Fn(&mut Graph<'_, f64>) -> NodeId, store: &mut ParamStore<f64>) {
        let grads = {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            g.backward(loss)
        };
        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            for i in 0..store.get(id).len() {
                let orig = store.get(id)[i];
                store.get_mut(id)[i] = orig + h;
                let up = {
                    let mut g = Graph::inference(store);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id)[i] = orig - h;
                let down = {
                    let mut g = Graph::inference(store);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id)[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.at(id, i);
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "{}[{i}]: analytic {an} vs numeric {fd}",
                    store.name(id)
                );
            }
        }
    }

    fn store_with(shapes: &[(&str, usize, usize)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        let ids = shapes
            .iter()
            .map(|&(n, r, c)| s.add(n, r, c, Init::Normal(0.7), &mut rng))
            .collect();
        (s, ids)
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let (mut store, ids) = store_with(&[("q", 6, 4), ("k", 9, 4), ("v", 9, 4), ("t", 6, 4)]);
        let build = |g: &mut Graph<'_, f64>| {
            let q = g.param(ids[0]);
            let k = g.param(ids[1]);
            let v = g.param(ids[2]);
            let a = g.attention(q, k, v, 2, 2, 3);
            let t = g.param(ids[3]);
            let m = g.mul(a, t);
            g.sum(m)
        };
        check(build, &mut store);
    }

    #[test]
    fn elementwise_and_norm_gradients() {
        let (mut store, ids) = store_with(&[("x", 3, 5), ("w", 5, 4), ("b", 1, 4), ("s", 1, 4)]);
        let build = |g: &mut Graph<'_, f64>| {
            let x = g.param(ids[0]);
            let w = g.param(ids[1]);
            let h = g.matmul(x, w);
            let b = g.param(ids[2]);
            let h = g.add_row(h, b);
            let n = g.layer_norm(h);
            let s = g.param(ids[3]);
            let n = g.mul_row(n, s);
            let a = g.gelu(n);
            let e = g.silu(a);
            let e = g.exp(e);
            let r = g.repeat_rows(e, 2);
            let m = g.mean_rows(r, 3);
            let l = g.l2_normalize_rows(m);
            let t = g.transpose(l);
            let c = g.clamp(t, -0.9, 0.9);
            let target = vec![0.1; 8];
            g.mse(c, &target)
        };
        check(build, &mut store);
    }

    #[test]
    fn cross_entropy_and_slicing_gradients() {
        let (mut store, ids) = store_with(&[("a", 4, 6), ("b", 4, 6)]);
        let build = |g: &mut Graph<'_, f64>| {
            let a = g.param(ids[0]);
            let b = g.param(ids[1]);
            let top = g.slice_rows(a, 1, 3);
            let bot = g.slice_rows(b, 0, 1);
            let cat = g.concat_rows(&[bot, top]);
            let left = g.slice_cols(cat, 0, 3);
            let right = g.slice_cols(cat, 3, 3);
            let d = g.sub(left, right);
            let bt = g.transpose(d);
            let logits = g.matmul(d, bt);
            let logits = g.scale(logits, 0.5);
            g.cross_entropy_diag(logits)
        };
        check(build, &mut store);
    }

    #[test]
    fn single_key_attention_is_a_projection_of_the_value() {
        let (store, ids) = store_with(&[("q", 3, 4), ("k", 1, 4), ("v", 1, 4)]);
        let mut g = Graph::inference(&store);
        let (q, k, v) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        let out = g.attention(q, k, v, 2, 3, 1);
        let vals = g.value(out);
        for r in 0..3 {
            assert_eq!(&vals[r * 4..(r + 1) * 4], store.get(ids[2]));
        }
        let rec = g.attention_record(out).unwrap();
        assert!(rec.probs.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn inference_graph_has_no_gradients() {
        let (store, ids) = store_with(&[("x", 2, 2)]);
        let mut g = Graph::inference(&store);
        let x = g.param(ids[0]);
        let s = g.sum(x);
        let grads = g.backward(s);
        assert!(grads.get(ids[0]).is_none());
    }
}
