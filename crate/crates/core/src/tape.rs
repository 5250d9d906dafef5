//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive pushes one node holding its output value and whatever it
//! needs for the backward pass. Nodes are appended in execution order, so the
//! backward sweep is a plain reverse iteration. Gradients for a node that
//! feeds several consumers are summed.

use crate::error::{Result, TbsError};
use crate::tensor::{compensated_sum, gemm_acc, gemm_nt_acc, gemm_tn_acc, Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds. Each one has its own analytical backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    MatMulNT,
    Linear,
    Transpose,
    Reshape,
    Add,
    Sub,
    Scale,
    MaskMul,
    SoftmaxRows,
    LayerNorm,
    CosineRows,
    Sigmoid,
    Relu,
    Conv2d,
    BceLoss,
    GatherRows,
    ConcatCols,
    ConcatRows,
    Pin,
    RowScale,
    Patchify,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::MatMul,
        OpKind::MatMulNT,
        OpKind::Linear,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Scale,
        OpKind::MaskMul,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::CosineRows,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Conv2d,
        OpKind::BceLoss,
        OpKind::GatherRows,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::Pin,
        OpKind::RowScale,
        OpKind::Patchify,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulNT => "matmul_nt",
            OpKind::Linear => "linear",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Scale => "scale",
            OpKind::MaskMul => "mask_mul",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::CosineRows => "cosine_rows",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Conv2d => "conv2d",
            OpKind::BceLoss => "bce_loss",
            OpKind::GatherRows => "gather_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Pin => "pin",
            OpKind::RowScale => "row_scale",
            OpKind::Patchify => "patchify",
            OpKind::Sum => "sum",
        }
    }
}

/// Lower clamp for probabilities entering a log.
pub const BCE_CLAMP: f64 = 1e-7;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    MaskMul(Var, Tensor<T>),
    SoftmaxRows(Var),
    LayerNorm { x: Var, xhat: Vec<T>, inv_std: T },
    CosineRows { a: Var, b: Var, eps: T },
    Sigmoid(Var),
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, cols: Vec<T> },
    BceLoss { p: Var, y: Tensor<T> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Pin { x: Var, mask: Vec<bool> },
    RowScale { x: Var, s: Var },
    Patchify { x: Var, patch: usize },
    Sum(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNT(..) => OpKind::MatMulNT,
            Op::Linear { .. } => OpKind::Linear,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::MaskMul(..) => OpKind::MaskMul,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::CosineRows { .. } => OpKind::CosineRows,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BceLoss { .. } => OpKind::BceLoss,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::Pin { .. } => OpKind::Pin,
            Op::RowScale { .. } => OpKind::RowScale,
            Op::Patchify { .. } => OpKind::Patchify,
            Op::Sum(_) => OpKind::Sum,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape. One graph per forward pass; values are immutable once pushed.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient with respect to `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TbsError {
    TbsError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: scales the backward of one op kind by 1.5 so that gradient
    /// checks have a negative control.
    #[doc(hidden)]
    pub fn with_fault(fault: OpKind) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Kinds of every non-leaf node, in execution order.
    pub fn op_trace(&self) -> Vec<OpKind> {
        self.nodes.iter().filter_map(|n| n.op.kind()).collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, deps: &[Var]) -> Var {
        let needs_grad = deps.iter().any(|d| self.nodes[d.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `A·Bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_nt")?;
        let (n, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulNT(a, b), &[a, b]))
    }

    /// `X·Wᵀ + b` with `X: n×in`, `W: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = self.value(x).dims2("linear")?;
        let (fout, fin2) = self.value(w).dims2("linear")?;
        if fin != fin2 {
            return Err(shape_err("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [fout] {
                return Err(shape_err("linear", self.shape(w), bias.shape()));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bias.data());
            }
        }
        gemm_nt_acc(self.value(x).data(), self.value(w).data(), &mut out, n, fin, fout);
        let t = Tensor::new(vec![n, fout], out)?;
        let deps: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Linear { x, w, b }, &deps))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |p, q| p + q)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |p, q| p - q)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mask_mul(&mut self, a: Var, m: Tensor<T>) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != m.shape() {
            return Err(shape_err("mask_mul", x.shape(), m.shape()));
        }
        let data = x.data().iter().zip(m.data()).map(|(&p, &q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MaskMul(a, m), &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = softmax_rows(self.value(a))?;
        Ok(self.push(t, Op::SoftmaxRows(a), &[a]))
    }

    /// Normalizes over all elements of `a`: `(v - mean) / sqrt(var + eps)`.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let x = self.value(a);
        let n = x.numel();
        if n < 2 {
            return Err(TbsError::Degenerate {
                op: "layer_norm",
                detail: format!("needs at least 2 elements, got {n}"),
            });
        }
        let nf = T::of(n as f64);
        let mean = x.sum() / nf;
        let var = x.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let inv_std = T::one() / (var + eps).sqrt();
        let xhat: Vec<T> = x.data().iter().map(|&v| (v - mean) * inv_std).collect();
        let t = Tensor::new(x.shape().to_vec(), xhat.clone())?;
        Ok(self.push(t, Op::LayerNorm { x: a, xhat, inv_std }, &[a]))
    }

    /// Row-wise cosine similarity, `n×d, n×d -> n`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("cosine_rows", x.shape(), y.shape()));
        }
        let (n, d) = x.dims2("cosine_rows")?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (xa, yb) = (&x.data()[i * d..(i + 1) * d], &y.data()[i * d..(i + 1) * d]);
            let (dot, na, nb) = dot_norms(xa, yb);
            out.push(dot / (na.max(eps) * nb.max(eps)));
        }
        let t = Tensor::new(vec![n], out)?;
        Ok(self.push(t, Op::CosineRows { a, b, eps }, &[a, b]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(t, Op::Relu(a), &[a])
    }

    /// 3×3 cross-correlation with padding 1. `x: C×H×W`, `w: C'×C×3×3`, `b: C'`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (&[c, h, wd], &[co, ci, 3, 3]) = (&xs[..], &ws[..]) else {
            return Err(shape_err("conv2d", &xs, &ws));
        };
        if c != ci || !(stride == 1 || stride == 2) {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err("conv2d", &ws, self.shape(b)));
            }
        }
        let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
        let cols = im2col(self.value(x).data(), c, h, wd, stride, ho, wo);
        let mut out = vec![T::zero(); co * ho * wo];
        if let Some(b) = b {
            for (row, &bv) in out.chunks_mut(ho * wo).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        gemm_acc(self.value(w).data(), &cols, &mut out, co, c * 9, ho * wo);
        let t = Tensor::new(vec![co, ho, wo], out)?;
        let deps: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, cols }, &deps))
    }

    /// Mean binary cross entropy; `p` is clamped to `[1e-7, 1 - 1e-7]` before the log.
    pub fn bce_loss(&mut self, p: Var, y: Tensor<T>) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != y.shape() {
            return Err(shape_err("bce_loss", pv.shape(), y.shape()));
        }
        let lo = T::of(BCE_CLAMP);
        let hi = T::one() - lo;
        let n = T::of(pv.numel() as f64);
        let total = compensated_sum(pv.data().iter().zip(y.data()).map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        }));
        let t = Tensor::scalar(total / n);
        Ok(self.push(t, Op::BceLoss { p, y }, &[p]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.dims2("gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(shape_err("gather_rows", xv.shape(), &[idx.len()]));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Concatenates along the column axis. Rank-1 inputs count as one column.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                match s[..] {
                    [r] if r == n => Ok(1),
                    [r, c] if r == n => Ok(c),
                    _ => Err(shape_err("concat_cols", self.shape(parts[0]), s)),
                }
            })
            .collect::<Result<_>>()?;
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..n {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![n, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, c) = self.value(parts[0]).dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = self.value(p).dims2("concat_rows")?;
            if c2 != c {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Overwrites masked positions with exactly 1; no gradient flows through them.
    pub fn pin(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != mask.len() {
            return Err(shape_err("pin", xv.shape(), &[mask.len()]));
        }
        let data = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { T::one() } else { v })
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Pin { x, mask: mask.to_vec() }, &[x]))
    }

    /// `out[i, :] = s[i] * x[i, :]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (n, c) = xv.dims2("row_scale")?;
        if sv.numel() != n {
            return Err(shape_err("row_scale", xv.shape(), sv.shape()));
        }
        let mut out = xv.data().to_vec();
        for (row, &k) in out.chunks_mut(c).zip(sv.data()) {
            for v in row {
                *v = *v * k;
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(t, Op::RowScale { x, s }, &[x, s]))
    }

    /// `C×H×W -> (H/p · W/p) × (C·p·p)`; patches h-major, pixels c, then row, then column.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let xv = self.value(x);
        let [c, h, w] = xv.shape()[..] else {
            return Err(shape_err("patchify", xv.shape(), &[patch]));
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(shape_err("patchify", xv.shape(), &[patch]));
        }
        let idx = patch_index(c, h, w, patch);
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        let t = Tensor::new(vec![(h / patch) * (w / patch), c * patch * patch], data)?;
        Ok(self.push(t, Op::Patchify { x, patch }, &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(TbsError::NotOnTape(loss.0));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TbsError::NotScalar(lv.shape().to_vec()));
        }
        self.backward_from(loss, Tensor::full(lv.shape(), T::one()))
    }

    /// Vector-Jacobian product: reverse sweep seeded with `upstream` at `out`.
    pub fn backward_from(&self, out: Var, upstream: Tensor<T>) -> Result<Grads<T>> {
        if out.0 >= self.nodes.len() {
            return Err(TbsError::NotOnTape(out.0));
        }
        if upstream.shape() != self.shape(out) {
            return Err(shape_err("backward", self.shape(out), upstream.shape()));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[out.0] = Some(upstream);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            let mut contribs = self.node_backward(node, &g)?;
            if node.op.kind() == self.fault {
                for (_, t) in &mut contribs {
                    *t = t.map(|v| v * T::of(1.5));
                }
            }
            for (v, t) in contribs {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut slots[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            slots[i] = Some(g);
        }
        Ok(Grads { slots })
    }

    /// Which side of every non-smooth point the current values sit on:
    /// ReLU input signs and BCE clamp states. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(a) => sig.extend(self.value(*a).data().iter().map(|&x| x > T::zero())),
                Op::BceLoss { p, .. } => {
                    let lo = T::of(BCE_CLAMP);
                    sig.extend(self.value(*p).data().iter().map(|&x| x < lo || x > T::one() - lo));
                }
                _ => {}
            }
        }
        sig
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].needs_grad;
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2("matmul")?;
                let n = val(*b).shape()[1];
                if need(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt_acc(gd, val(*b).data(), &mut da, m, n, k);
                    out.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if need(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn_acc(val(*a).data(), gd, &mut db, m, k, n);
                    out.push((*b, Tensor::new(vec![k, n], db)?));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = val(*a).dims2("matmul_nt")?;
                let n = val(*b).shape()[0];
                if need(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_acc(gd, val(*b).data(), &mut da, m, n, k);
                    out.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if need(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn_acc(gd, val(*a).data(), &mut db, m, n, k);
                    out.push((*b, Tensor::new(vec![n, k], db)?));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = val(*x).dims2("linear")?;
                let fout = val(*w).shape()[0];
                if need(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    gemm_acc(gd, val(*w).data(), &mut dx, n, fout, fin);
                    out.push((*x, Tensor::new(vec![n, fin], dx)?));
                }
                if need(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm_tn_acc(gd, val(*x).data(), &mut dw, n, fout, fin);
                    out.push((*w, Tensor::new(vec![fout, fin], dw)?));
                }
                if let Some(b) = b.filter(|&b| need(b)) {
                    let mut db = vec![T::zero(); fout];
                    for row in gd.chunks(fout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    out.push((b, Tensor::new(vec![fout], db)?));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose2()?)),
            Op::Reshape(a) => out.push((*a, g.clone().reshape(val(*a).shape())?)),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Scale(a, c) => out.push((*a, g.map(|v| v * *c))),
            Op::MaskMul(a, m) => {
                let d = gd.iter().zip(m.data()).map(|(&p, &q)| p * q).collect();
                out.push((*a, Tensor::new(g.shape().to_vec(), d)?));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (r, c) = y.dims2("softmax_rows")?;
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let (yr, gr) = (&y.data()[i * c..(i + 1) * c], &gd[i * c..(i + 1) * c]);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, Tensor::new(vec![r, c], dx)?));
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = T::of(xhat.len() as f64);
                let sg: T = gd.iter().copied().sum();
                let sgx: T = gd.iter().zip(xhat).map(|(&p, &q)| p * q).sum();
                let d = gd
                    .iter()
                    .zip(xhat)
                    .map(|(&gi, &xi)| *inv_std / n * (n * gi - sg - xi * sgx))
                    .collect();
                out.push((*x, Tensor::new(val(*x).shape().to_vec(), d)?));
            }
            Op::CosineRows { a, b, eps } => {
                let (xa, yb) = (val(*a), val(*b));
                let (n, d) = xa.dims2("cosine_rows")?;
                let mut da = vec![T::zero(); n * d];
                let mut db = vec![T::zero(); n * d];
                for i in 0..n {
                    let r = i * d..(i + 1) * d;
                    let (u, v) = (&xa.data()[r.clone()], &yb.data()[r.clone()]);
                    let (dot, na, nb) = dot_norms(u, v);
                    let (ma, mb) = (na.max(*eps), nb.max(*eps));
                    let f = dot / (ma * mb);
                    let gi = gd[i];
                    for j in 0..d {
                        let mut ga = v[j] / (ma * mb);
                        if na > *eps {
                            ga = ga - f * u[j] / (na * na);
                        }
                        let mut gb = u[j] / (ma * mb);
                        if nb > *eps {
                            gb = gb - f * v[j] / (nb * nb);
                        }
                        da[i * d + j] = gi * ga;
                        db[i * d + j] = gi * gb;
                    }
                }
                out.push((*a, Tensor::new(vec![n, d], da)?));
                out.push((*b, Tensor::new(vec![n, d], db)?));
            }
            Op::Sigmoid(a) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gi)| gi * y * (T::one() - y))
                    .collect();
                out.push((*a, Tensor::new(g.shape().to_vec(), d)?));
            }
            Op::Relu(a) => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gi)| if x > T::zero() { gi } else { T::zero() })
                    .collect();
                out.push((*a, Tensor::new(g.shape().to_vec(), d)?));
            }
            Op::Conv2d { x, w, b, stride, cols } => {
                let [c, h, wd] = val(*x).shape()[..] else { unreachable!() };
                let co = val(*w).shape()[0];
                let (ho, wo) = (h.div_ceil(*stride), wd.div_ceil(*stride));
                let hw = ho * wo;
                if need(*w) {
                    let mut dw = vec![T::zero(); co * c * 9];
                    gemm_nt_acc(gd, cols, &mut dw, co, hw, c * 9);
                    out.push((*w, Tensor::new(vec![co, c, 3, 3], dw)?));
                }
                if let Some(b) = b.filter(|&b| need(b)) {
                    let db = gd.chunks(hw).map(|r| r.iter().copied().sum()).collect();
                    out.push((b, Tensor::new(vec![co], db)?));
                }
                if need(*x) {
                    let mut dcols = vec![T::zero(); c * 9 * hw];
                    gemm_tn_acc(val(*w).data(), gd, &mut dcols, co, c * 9, hw);
                    let dx = col2im(&dcols, c, h, wd, *stride, ho, wo);
                    out.push((*x, Tensor::new(vec![c, h, wd], dx)?));
                }
            }
            Op::BceLoss { p, y } => {
                let lo = T::of(BCE_CLAMP);
                let hi = T::one() - lo;
                let n = T::of(y.numel() as f64);
                let d = val(*p)
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&pv, &yv)| {
                        if pv < lo || pv > hi {
                            T::zero()
                        } else {
                            gd[0] * (pv - yv) / (pv * (T::one() - pv)) / n
                        }
                    })
                    .collect();
                out.push((*p, Tensor::new(y.shape().to_vec(), d)?));
            }
            Op::GatherRows { x, idx } => {
                let (n, c) = val(*x).dims2("gather_rows")?;
                let mut dx = vec![T::zero(); n * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] = dx[i * c + j] + gd[k * c + j];
                    }
                }
                out.push((*x, Tensor::new(vec![n, c], dx)?));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let n = node.value.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let s = val(p).shape().to_vec();
                    let w = if s.len() == 1 { 1 } else { s[1] };
                    let mut d = Vec::with_capacity(n * w);
                    for i in 0..n {
                        d.extend_from_slice(&gd[i * total + off..i * total + off + w]);
                    }
                    out.push((p, Tensor::new(s, d)?));
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let s = val(p).shape().to_vec();
                    let len = s.iter().product::<usize>();
                    out.push((p, Tensor::new(s, gd[off..off + len].to_vec())?));
                    off += len;
                }
            }
            Op::Pin { x, mask } => {
                let d = gd
                    .iter()
                    .zip(mask)
                    .map(|(&gi, &m)| if m { T::zero() } else { gi })
                    .collect();
                out.push((*x, Tensor::new(g.shape().to_vec(), d)?));
            }
            Op::RowScale { x, s } => {
                let (xv, sv) = (val(*x), val(*s));
                let (n, c) = xv.dims2("row_scale")?;
                if need(*x) {
                    let mut dx = gd.to_vec();
                    for (row, &k) in dx.chunks_mut(c).zip(sv.data()) {
                        for v in row {
                            *v = *v * k;
                        }
                    }
                    out.push((*x, Tensor::new(vec![n, c], dx)?));
                }
                if need(*s) {
                    let ds = (0..n)
                        .map(|i| {
                            let r = i * c..(i + 1) * c;
                            gd[r.clone()].iter().zip(&xv.data()[r]).map(|(&p, &q)| p * q).sum()
                        })
                        .collect();
                    out.push((*s, Tensor::new(sv.shape().to_vec(), ds)?));
                }
            }
            Op::Patchify { x, patch } => {
                let [c, h, w] = val(*x).shape()[..] else { unreachable!() };
                let idx = patch_index(c, h, w, *patch);
                let mut dx = vec![T::zero(); c * h * w];
                for (k, &i) in idx.iter().enumerate() {
                    dx[i] = gd[k];
                }
                out.push((*x, Tensor::new(vec![c, h, w], dx)?));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), gd[0]))),
        }
        Ok(out)
    }
}

fn dot_norms<T: Scalar>(u: &[T], v: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut nu = T::zero();
    let mut nv = T::zero();
    for (&a, &b) in u.iter().zip(v) {
        dot = dot + a * b;
        nu = nu + a * a;
        nv = nv + b * b;
    }
    (dot, nu.sqrt(), nv.sqrt())
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = m.dims2("softmax_rows")?;
    if c == 0 {
        return Err(TbsError::EmptyAxis { op: "softmax_rows" });
    }
    let mut out = m.data().to_vec();
    for row in out.chunks_mut(c).take(r) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Tensor::new(vec![r, c], out)
}

fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(c * h * w);
    for ph in 0..h / p {
        for pw in 0..w / p {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push(ch * h * w + (ph * p + dy) * w + pw * p + dx);
                    }
                }
            }
        }
    }
    idx
}

/// Column matrix `(C·9) × (Ho·Wo)` for a padded 3×3 window.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, s: usize, ho: usize, wo: usize) -> Vec<T> {
    let mut cols = vec![T::zero(); c * 9 * ho * wo];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * wo + ox] = x[ch * h * w + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, s: usize, ho: usize, wo: usize) -> Vec<T> {
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = ch * h * w + iy as usize * w + ix as usize;
                        x[i] = x[i] + cols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}
