//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already a topological order. [`Graph::backward`] walks it in
//! reverse and accumulates gradients additively into each parent.

use std::sync::Arc;

use super::error::AutodiffError;
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Real, Shape, StridedRef, Tensor};

/// Epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Static description of a fused multi-head self-attention node.
#[derive(Clone, Debug)]
pub struct AttentionSpec<T> {
    pub heads: usize,
    /// Tokens per sequence; rows of the input are `batch * seq_len`.
    pub seq_len: usize,
    /// Rotate queries and keys by position before the dot product.
    pub rope: bool,
    /// Additive score bias laid out as `[heads * seq_len, seq_len]`.
    pub bias: Option<Arc<Tensor<T>>>,
}

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    AddConst(NodeId),
    MulConst(NodeId, Vec<T>),
    Relu(NodeId),
    Gelu(NodeId, Vec<T>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(NodeId),
    MeanPool {
        x: NodeId,
        group: usize,
    },
    Attention {
        qkv: NodeId,
        heads: usize,
        seq_len: usize,
        rope: bool,
        q: Vec<T>,
        k: Vec<T>,
        probs: Vec<T>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Mse {
        pred: NodeId,
        diff: Vec<T>,
        row_weight: Option<Vec<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// One forward pass worth of recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    track_params: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            track_params: true,
        }
    }

    /// A graph whose parameter leaves never require gradients.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, Op::Leaf { param: None })
    }

    /// Free differentiable leaf, used by tests and gradient checks.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true, Op::Leaf { param: None })
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let value = store.value(id).clone();
        let track = self.track_params;
        self.push(value, track, Op::Leaf { param: Some(id) })
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Shape, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        gemm(
            sa.0,
            sa.1,
            sb.1,
            T::one(),
            self.value(a).view(),
            self.value(b).view(),
            T::zero(),
            out.data_mut(),
            0,
            sb.1,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        make: fn(NodeId, NodeId) -> Op<T>,
    ) -> Result<NodeId, AutodiffError> {
        let s = self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(s.0, s.1, data), rg, make(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `x[r, c] + bias[0, c]` for every row.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.0 != 1 || sb.1 != sx.1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: sx,
                right: sb,
            });
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(sx.1) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, rg, Op::AddRow(x, bias)))
    }

    /// `x · W + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Scale(x, c))
    }

    /// Adds a constant tensor; the gradient passes through unchanged.
    pub fn add_const(&mut self, x: NodeId, c: &Tensor<T>) -> Result<NodeId, AutodiffError> {
        let (sx, sc) = (self.shape(x), c.shape());
        if sx != sc {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_const",
                left: sx,
                right: sc,
            });
        }
        let mut out = self.value(x).clone();
        out.add_assign(c);
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::AddConst(x)))
    }

    /// Elementwise product with a constant mask (dropout, loss masks).
    pub fn mul_const(&mut self, x: NodeId, mask: Vec<T>) -> Result<NodeId, AutodiffError> {
        let sx = self.shape(x);
        if mask.len() != sx.0 * sx.1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_const",
                left: sx,
                right: Shape(1, mask.len()),
            });
        }
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(sx.0, sx.1, data), rg, Op::MulConst(x, mask)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(s.0, s.1, data), rg, Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
        let src = self.value(x).data();
        let tanh: Vec<T> = src.iter().map(|&v| fast_tanh(c * (v + a * v * v * v))).collect();
        let data = src
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| half * v * (T::one() + t))
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(s.0, s.1, data), rg, Op::Gelu(x, tanh))
    }

    /// Row-wise layer normalisation with learned `gamma`/`beta` (`1 × cols`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, AutodiffError> {
        let sx = self.shape(x);
        for p in [gamma, beta] {
            let sp = self.shape(p);
            if sp != Shape(1, sx.1) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    left: sx,
                    right: sp,
                });
            }
        }
        let n = T::lit(sx.1 as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Vec::with_capacity(sx.0 * sx.1);
        let mut inv_std = Vec::with_capacity(sx.0);
        let mut out = Vec::with_capacity(sx.0 * sx.1);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        for row in self.value(x).data().chunks(sx.1) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_vec(sx.0, sx.1, out),
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(s.1) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Softmax(x))
    }

    /// Averages consecutive groups of `group` rows: `[b·group, c] → [b, c]`.
    pub fn mean_pool(&mut self, x: NodeId, group: usize) -> Result<NodeId, AutodiffError> {
        let s = self.shape(x);
        if group == 0 || s.0 == 0 || !s.0.is_multiple_of(group) {
            return Err(AutodiffError::InvalidArgument(format!(
                "mean_pool group {group} does not divide {} rows",
                s.0
            )));
        }
        let b = s.0 / group;
        let inv = T::one() / T::lit(group as f64);
        let mut out = Tensor::zeros(b, s.1);
        let src = self.value(x).data();
        for (i, chunk) in src.chunks(s.1).enumerate() {
            let dst = &mut out.data_mut()[(i / group) * s.1..(i / group + 1) * s.1];
            for (d, &v) in dst.iter_mut().zip(chunk) {
                *d += v * inv;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::MeanPool { x, group }))
    }

    /// Fused bidirectional multi-head self-attention.
    ///
    /// `qkv` is `[batch·seq_len, 3·d_model]` holding queries, keys and values
    /// side by side; the result is `[batch·seq_len, d_model]` with heads
    /// concatenated along columns.
    pub fn attention(&mut self, qkv: NodeId, layout: &AttentionSpec<T>) -> Result<NodeId, AutodiffError> {
        let s = self.shape(qkv);
        let (h, l) = (layout.heads, layout.seq_len);
        if h == 0 || l == 0 || !s.1.is_multiple_of(3) || !s.0.is_multiple_of(l) || !(s.1 / 3).is_multiple_of(h) {
            return Err(AutodiffError::InvalidArgument(format!(
                "attention input {s} incompatible with {h} heads over {l} tokens"
            )));
        }
        let d = s.1 / 3;
        let dh = d / h;
        if layout.rope && !dh.is_multiple_of(2) {
            return Err(AutodiffError::InvalidArgument(format!(
                "rotary embedding needs an even head dimension, got {dh}"
            )));
        }
        if let Some(bias) = &layout.bias {
            if bias.shape() != Shape(h * l, l) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "attention bias",
                    left: Shape(h * l, l),
                    right: bias.shape(),
                });
            }
        }
        let batch = s.0 / l;
        let src = self.value(qkv).data();
        let rot = layout.rope.then(|| RopeTable::new(l, dh));
        // Queries and keys laid out as [batch, head, token, dh].
        let mut q = vec![T::zero(); batch * h * l * dh];
        let mut k = vec![T::zero(); batch * h * l * dh];
        for b in 0..batch {
            for t in 0..l {
                let row = &src[(b * l + t) * s.1..(b * l + t + 1) * s.1];
                for hh in 0..h {
                    let dst = ((b * h + hh) * l + t) * dh;
                    q[dst..dst + dh].copy_from_slice(&row[hh * dh..(hh + 1) * dh]);
                    k[dst..dst + dh].copy_from_slice(&row[d + hh * dh..d + (hh + 1) * dh]);
                    if let Some(rot) = &rot {
                        rot.apply(&mut q[dst..dst + dh], t, false);
                        rot.apply(&mut k[dst..dst + dh], t, false);
                    }
                }
            }
        }
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); batch * h * l * l];
        let mut out = Tensor::zeros(s.0, d);
        for b in 0..batch {
            for hh in 0..h {
                let qo = ((b * h + hh) * l) * dh;
                let po = (b * h + hh) * l * l;
                // scores = q kᵀ · scale
                gemm(
                    l,
                    dh,
                    l,
                    scale,
                    StridedRef::new(&q, qo, dh, 1),
                    StridedRef::new(&k, qo, dh, 1).t(),
                    T::zero(),
                    &mut probs,
                    po,
                    l,
                );
                let p = &mut probs[po..po + l * l];
                if let Some(bias) = &layout.bias {
                    let bb = &bias.data()[hh * l * l..(hh + 1) * l * l];
                    for (pv, &bv) in p.iter_mut().zip(bb) {
                        *pv += bv;
                    }
                }
                for row in p.chunks_mut(l) {
                    softmax_in_place(row);
                }
                // out[:, head] = P v
                gemm(
                    l,
                    l,
                    dh,
                    T::one(),
                    StridedRef::new(&probs, po, l, 1),
                    StridedRef::new(src, b * l * s.1 + 2 * d + hh * dh, s.1, 1),
                    T::zero(),
                    out.data_mut(),
                    b * l * d + hh * dh,
                    d,
                );
            }
        }
        let rg = self.rg(&[qkv]);
        Ok(self.push(
            out,
            rg,
            Op::Attention {
                qkv,
                heads: h,
                seq_len: l,
                rope: layout.rope,
                q,
                k,
                probs,
            },
        ))
    }

    /// Attention weights recorded by an attention node, `[batch, head, L, L]` flattened.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let total = v.data().iter().copied().sum::<T>() / T::lit(v.len().max(1) as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Mean(x))
    }

    /// Batch mean of squared L2 row errors: `(1/B) Σ_r ‖pred_r − target_r‖²`.
    pub fn mse_loss(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId, AutodiffError> {
        self.mse_impl(pred, target, None)
    }

    /// As [`Graph::mse_loss`] with per-row weights; the denominator stays `B`.
    pub fn masked_mse_loss(
        &mut self,
        pred: NodeId,
        target: &Tensor<T>,
        row_weight: Vec<T>,
    ) -> Result<NodeId, AutodiffError> {
        self.mse_impl(pred, target, Some(row_weight))
    }

    fn mse_impl(
        &mut self,
        pred: NodeId,
        target: &Tensor<T>,
        row_weight: Option<Vec<T>>,
    ) -> Result<NodeId, AutodiffError> {
        let sp = self.shape(pred);
        if sp != target.shape() || sp.0 == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "mse_loss",
                left: sp,
                right: target.shape(),
            });
        }
        if let Some(w) = &row_weight {
            if w.len() != sp.0 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "masked_mse_loss",
                    left: sp,
                    right: Shape(w.len(), 1),
                });
            }
        }
        let diff: Vec<T> = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| p - t)
            .collect();
        let mut total = T::zero();
        for (r, row) in diff.chunks(sp.1).enumerate() {
            let w = row_weight.as_ref().map_or(T::one(), |w| w[r]);
            total += w * row.iter().map(|&e| e * e).sum::<T>();
        }
        let loss = total / T::lit(sp.0 as f64);
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::Mse { pred, diff, row_weight }))
    }

    /// Propagates `∂root/∂node` to every node that requires a gradient.
    pub fn backward(&mut self, root: NodeId) -> Result<(), AutodiffError> {
        let rs = self.shape(root);
        if rs != Shape(1, 1) {
            return Err(AutodiffError::NonScalarRoot(rs));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let want = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if want(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.view(),
                        vb.view().t(),
                        T::zero(),
                        da.data_mut(),
                        0,
                        k,
                    );
                    accumulate(grads, *a, da);
                }
                if want(*b) {
                    let mut db = Tensor::zeros(k, n);
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.view().t(),
                        g.view(),
                        T::zero(),
                        db.data_mut(),
                        0,
                        n,
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, map(g, |v| -v));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, zip(g, self.value(*b), |x, y| x * y));
                }
                if want(*b) {
                    accumulate(grads, *b, zip(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, bias) => {
                if want(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if want(*bias) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for row in g.data().chunks(g.cols()) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, map(g, |v| v * *c)),
            Op::AddConst(x) => accumulate(grads, *x, g.clone()),
            Op::MulConst(x, mask) => {
                let data = g.data().iter().zip(mask).map(|(&v, &m)| v * m).collect();
                accumulate(grads, *x, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::Relu(x) => {
                let dx = zip(g, self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                accumulate(grads, *x, dx);
            }
            Op::Gelu(x, tanh) => {
                let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                let three = T::lit(3.0);
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .zip(tanh)
                    .map(|((&gv, &v), &t)| {
                        let d =
                            half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        gv * d
                    })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = g.cols();
                let gam = self.value(*gamma).data();
                if want(*gamma) {
                    let mut dg = Tensor::zeros(1, cols);
                    for (grow, hrow) in g.data().chunks(cols).zip(xhat.chunks(cols)) {
                        for ((d, &gv), &hv) in dg.data_mut().iter_mut().zip(grow).zip(hrow) {
                            *d += gv * hv;
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if want(*beta) {
                    let mut db = Tensor::zeros(1, cols);
                    for grow in g.data().chunks(cols) {
                        for (d, &gv) in db.data_mut().iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                    accumulate(grads, *beta, db);
                }
                if want(*x) {
                    let n = T::lit(cols as f64);
                    let mut dx = Tensor::zeros(g.rows(), cols);
                    for (r, (grow, hrow)) in g.data().chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..cols {
                            let dh = grow[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                        }
                        let k = inv_std[r] / n;
                        let out = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            let dh = grow[j] * gam[j];
                            out[j] = k * (n * dh - s1 - hrow[j] * s2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = Tensor::zeros(y.rows(), cols);
                for ((yrow, grow), drow) in y
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(dx.data_mut().chunks_mut(cols))
                {
                    let dot = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..cols {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::MeanPool { x, group } => {
                let sx = self.shape(*x);
                let inv = T::one() / T::lit(*group as f64);
                let mut dx = Tensor::zeros(sx.0, sx.1);
                for (i, row) in dx.data_mut().chunks_mut(sx.1).enumerate() {
                    for (d, &gv) in row.iter_mut().zip(g.row(i / group)) {
                        *d = gv * inv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                qkv,
                heads,
                seq_len,
                rope,
                q,
                k,
                probs,
            } => {
                let dx = self.attention_backward(*qkv, *heads, *seq_len, *rope, q, k, probs, g);
                accumulate(grads, *qkv, dx);
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                accumulate(grads, *x, Tensor::full(s.0, s.1, g.item()));
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                let v = g.item() / T::lit((s.0 * s.1).max(1) as f64);
                accumulate(grads, *x, Tensor::full(s.0, s.1, v));
            }
            Op::Mse { pred, diff, row_weight } => {
                let s = self.shape(*pred);
                let k = T::lit(2.0) * g.item() / T::lit(s.0 as f64);
                let mut dp = Tensor::zeros(s.0, s.1);
                for (r, (drow, erow)) in dp.data_mut().chunks_mut(s.1).zip(diff.chunks(s.1)).enumerate() {
                    let w = row_weight.as_ref().map_or(T::one(), |w| w[r]);
                    for (d, &e) in drow.iter_mut().zip(erow) {
                        *d = k * w * e;
                    }
                }
                accumulate(grads, *pred, dp);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        qkv: NodeId,
        h: usize,
        l: usize,
        rope: bool,
        q: &[T],
        k: &[T],
        probs: &[T],
        g: &Tensor<T>,
    ) -> Tensor<T> {
        let src = self.value(qkv);
        let s = src.shape();
        let d = s.1 / 3;
        let dh = d / h;
        let batch = s.0 / l;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dx = Tensor::zeros(s.0, s.1);
        let mut dp = vec![T::zero(); l * l];
        let mut dq = vec![T::zero(); l * dh];
        let mut dk = vec![T::zero(); l * dh];
        let rot = rope.then(|| RopeTable::new(l, dh));
        for b in 0..batch {
            for hh in 0..h {
                let po = (b * h + hh) * l * l;
                let qo = (b * h + hh) * l * dh;
                let p = &probs[po..po + l * l];
                let g_view = StridedRef::new(g.data(), b * l * d + hh * dh, d, 1);
                let v_view = StridedRef::new(src.data(), b * l * s.1 + 2 * d + hh * dh, s.1, 1);
                // dV = Pᵀ dO, written straight into the value columns.
                gemm(
                    l,
                    l,
                    dh,
                    T::one(),
                    StridedRef::new(probs, po, l, 1).t(),
                    g_view,
                    T::zero(),
                    dx.data_mut(),
                    b * l * s.1 + 2 * d + hh * dh,
                    s.1,
                );
                // dP = dO Vᵀ
                gemm(l, dh, l, T::one(), g_view, v_view.t(), T::zero(), &mut dp, 0, l);
                // softmax backward, folded with the score scale
                for (prow, drow) in p.chunks(l).zip(dp.chunks_mut(l)) {
                    let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..l {
                        drow[j] = prow[j] * (drow[j] - dot) * scale;
                    }
                }
                gemm(
                    l,
                    l,
                    dh,
                    T::one(),
                    StridedRef::new(&dp, 0, l, 1),
                    StridedRef::new(k, qo, dh, 1),
                    T::zero(),
                    &mut dq,
                    0,
                    dh,
                );
                gemm(
                    l,
                    l,
                    dh,
                    T::one(),
                    StridedRef::new(&dp, 0, l, 1).t(),
                    StridedRef::new(q, qo, dh, 1),
                    T::zero(),
                    &mut dk,
                    0,
                    dh,
                );
                for t in 0..l {
                    let qs = &mut dq[t * dh..(t + 1) * dh];
                    let ks = &mut dk[t * dh..(t + 1) * dh];
                    if let Some(rot) = &rot {
                        rot.apply(qs, t, true);
                        rot.apply(ks, t, true);
                    }
                    let row = (b * l + t) * s.1;
                    let out = dx.data_mut();
                    out[row + hh * dh..row + (hh + 1) * dh].copy_from_slice(qs);
                    out[row + d + hh * dh..row + d + (hh + 1) * dh].copy_from_slice(ks);
                }
            }
        }
        dx
    }

    /// Gradients for every parameter in `store`; zero where unreachable.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    if pid.index() < out.len() {
                        out[pid.index()].add_assign(g);
                    }
                }
            }
        }
        out
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn map<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Rotates consecutive coordinate pairs by `pos · 10000^(−2i/dim)`.
/// `inverse` applies the transpose rotation.
pub(crate) fn rope_in_place<T: Real>(v: &mut [T], pos: usize, inverse: bool) {
    let dim = v.len();
    for i in 0..dim / 2 {
        let theta = rope_angle(pos, i, dim);
        let (sin, cos) = theta.sin_cos();
        let (s, c) = (T::lit(if inverse { -sin } else { sin }), T::lit(cos));
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Precomputed rotary angles for every `(position, pair)` in a window.
struct RopeTable<T> {
    half: usize,
    sin: Vec<T>,
    cos: Vec<T>,
}

impl<T: Real> RopeTable<T> {
    fn new(len: usize, dim: usize) -> Self {
        let half = dim / 2;
        let mut sin = Vec::with_capacity(len * half);
        let mut cos = Vec::with_capacity(len * half);
        for pos in 0..len {
            for i in 0..half {
                let (s, c) = rope_angle(pos, i, dim).sin_cos();
                sin.push(T::lit(s));
                cos.push(T::lit(c));
            }
        }
        Self { half, sin, cos }
    }

    fn apply(&self, v: &mut [T], pos: usize, inverse: bool) {
        let base = pos * self.half;
        for i in 0..self.half {
            let (c, mut s) = (self.cos[base + i], self.sin[base + i]);
            if inverse {
                s = -s;
            }
            let (a, b) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = a * c - b * s;
            v[2 * i + 1] = a * s + b * c;
        }
    }
}

fn rope_angle(pos: usize, pair: usize, dim: usize) -> f64 {
    pos as f64 * 10000f64.powf(-2.0 * pair as f64 / dim as f64)
}

/// `tanh` through a single `exp`; saturates cleanly for large `|x|`.
fn fast_tanh<T: Real>(x: T) -> T {
    let limit = T::lit(15.0);
    if x > limit {
        return T::one();
    }
    if x < -limit {
        return -T::one();
    }
    let e = (x + x).exp();
    (e - T::one()) / (e + T::one())
}
