//! Append-only autodiff tape.
//!
//! Every op validates shapes, computes its value eagerly, checks the result is
//! finite, and records a backward step. `backward()` walks the tape in reverse
//! and accumulates gradients into per-node buffers; calling it twice without a
//! reset doubles every gradient (accumulation semantics).

use super::{axis_split, Tensor};
use super::{ParamId, ParamStore};
use crate::error::{Error, Result};
use rand::Rng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Relu,
    Sigmoid,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutKind {
    /// Independent Bernoulli mask per element.
    Standard,
    /// One mask per sequence, reused at every timestep (rank-3 inputs only).
    Variational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Mae,
    CrossEntropy,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Mse => write!(f, "mse"),
            LossKind::Mae => write!(f, "mae"),
            LossKind::CrossEntropy => write!(f, "cross_entropy"),
        }
    }
}

enum Step {
    Leaf,
    Unary {
        a: TensorId,
        kind: UnaryKind,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    AddBias {
        a: TensorId,
        bias: TensorId,
    },
    Affine {
        a: TensorId,
        scale: f64,
    },
    MulScalar {
        a: TensorId,
        s: TensorId,
    },
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Bmm {
        a: TensorId,
        b: TensorId,
        rhs_transposed: bool,
    },
    ConcatLast {
        parts: Vec<TensorId>,
        widths: Vec<usize>,
    },
    StackTime {
        parts: Vec<TensorId>,
    },
    SliceTime {
        a: TensorId,
        t: usize,
    },
    Reshape {
        a: TensorId,
    },
    MaskedMax {
        a: TensorId,
        argmax: Vec<usize>,
    },
    MaskedMean {
        a: TensorId,
        axis: usize,
        mask: Option<TensorId>,
        inv_counts: Vec<f64>,
    },
    Softmax {
        a: TensorId,
        axis: usize,
    },
    LogSoftmax {
        a: TensorId,
        axis: usize,
        probs: Vec<f64>,
    },
    SumAll {
        a: TensorId,
        scale: f64,
    },
    Gather {
        a: TensorId,
        indices: Vec<usize>,
    },
    Dropout {
        a: TensorId,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    step: Step,
}

/// A dynamic compute graph; one per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    leases: Vec<(ParamId, TensorId)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            leases: Vec::new(),
        }
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape_of(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, id: TensorId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| {
            Tensor::from_vec(node.value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    /// Adds a leaf holding `value`. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<TensorId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, requires_grad, Step::Leaf))
    }

    /// Adds a constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<TensorId> {
        self.leaf(value, false)
    }

    /// Leases a stored parameter into the graph. Repeated leases of the same
    /// parameter return the same node so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<TensorId> {
        if let Some(&(_, tid)) = self.leases.iter().find(|(pid, _)| *pid == id) {
            return Ok(tid);
        }
        let tid = self.leaf(store.value(id).clone(), true)?;
        self.leases.push((id, tid));
        Ok(tid)
    }

    /// Gradients of every leased parameter that received one.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.leases
            .iter()
            .filter_map(|&(pid, tid)| self.grad(tid).map(|g| (pid, g)))
            .collect()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, step: Step) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            step,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: &'static str, value: Tensor, parents: &[TensorId], step: Step) -> Result<TensorId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(value, needs, step))
    }

    // ---- elementwise ----

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, UnaryKind::Tanh)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, UnaryKind::Abs)
    }

    pub fn unary(&mut self, a: TensorId, kind: UnaryKind) -> Result<TensorId> {
        let av = &self.nodes[a.0].value;
        let data = av
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Relu => x.max(0.0),
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
                UnaryKind::Abs => x.abs(),
            })
            .collect();
        let value = Tensor::from_vec(av.shape().to_vec(), data)?;
        self.push_op("unary", value, &[a], Step::Unary { a, kind })
    }

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        step: Step,
    ) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(av.shape().to_vec(), data)?;
        self.push_op(op, value, &[a, b], step)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Step::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Step::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Step::Mul { a, b })
    }

    /// Adds a rank-1 bias along the last axis of `a`.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if bv.ndim() != 1 || av.ndim() == 0 || av.shape()[av.ndim() - 1] != bv.shape()[0] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias {:?}", av.shape(), bv.shape()),
            ));
        }
        let width = bv.shape()[0];
        let mut data = av.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bv.data()[i % width];
        }
        let value = Tensor::from_vec(av.shape().to_vec(), data)?;
        self.push_op("add_bias", value, &[a, bias], Step::AddBias { a, bias })
    }

    /// Elementwise `scale * a + shift`.
    pub fn affine(&mut self, a: TensorId, scale: f64, shift: f64) -> Result<TensorId> {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| scale * x + shift).collect();
        let value = Tensor::from_vec(av.shape().to_vec(), data)?;
        self.push_op("affine", value, &[a], Step::Affine { a, scale })
    }

    /// Multiplies `a` by a rank-0 graph scalar (gradient flows into both).
    pub fn mul_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let sv = &self.nodes[s.0].value;
        if sv.numel() != 1 {
            return Err(Error::shape("mul_scalar", format!("scalar has shape {:?}", sv.shape())));
        }
        let k = sv.item();
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| k * x).collect();
        let value = Tensor::from_vec(av.shape().to_vec(), data)?;
        self.push_op("mul_scalar", value, &[a, s], Step::MulScalar { a, s })
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        mm_nn_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::from_vec(vec![m, n], out)?;
        self.push_op("matmul", value, &[a, b], Step::Matmul { a, b })
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bmm_impl(a, b, false)
    }

    /// Batched product with the right operand transposed:
    /// `[B,m,k] x [B,n,k] -> [B,m,n]`, i.e. pairwise dot products of rows.
    pub fn bmm_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: TensorId, b: TensorId, rhs_transposed: bool) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let op: &'static str = if rhs_transposed { "bmm_nt" } else { "bmm" };
        if av.ndim() != 3 || bv.ndim() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::shape(op, format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if rhs_transposed {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(Error::shape(op, format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; batch * m * n];
        let bstride = k * n;
        for i in 0..batch {
            let asl = &av.data()[i * m * k..i * m * k + m * k];
            let bsl = &bv.data()[i * bstride..i * bstride + bstride];
            let osl = &mut out[i * m * n..i * m * n + m * n];
            if rhs_transposed {
                mm_nt_acc(asl, bsl, osl, m, k, n);
            } else {
                mm_nn_acc(asl, bsl, osl, m, k, n);
            }
        }
        let value = Tensor::from_vec(vec![batch, m, n], out)?;
        self.push_op(op, value, &[a, b], Step::Bmm { a, b, rhs_transposed })
    }

    // ---- structural ----

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_last needs at least one part".into()));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if first.is_empty() {
            return Err(Error::shape("concat_last", "parts must have rank >= 1"));
        }
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape(
                    "concat_last",
                    format!("{:?} incompatible with {:?}", s, first),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p.0].value.data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..r * w + w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::from_vec(shape, data)?;
        self.push_op(
            "concat_last",
            value,
            parts,
            Step::ConcatLast {
                parts: parts.to_vec(),
                widths,
            },
        )
    }

    /// Stacks `T` rank-2 `[b,d]` tensors into `[b,T,d]`.
    pub fn stack_time(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::EmptySequence);
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if first.len() != 2 {
            return Err(Error::shape("stack_time", format!("expected rank 2, got {:?}", first)));
        }
        let (b, d) = (first[0], first[1]);
        for &p in parts {
            if self.nodes[p.0].value.shape() != [b, d] {
                return Err(Error::shape(
                    "stack_time",
                    format!("{:?} vs {:?}", self.nodes[p.0].value.shape(), first),
                ));
            }
        }
        let t_len = parts.len();
        let mut data = vec![0.0; b * t_len * d];
        for (t, &p) in parts.iter().enumerate() {
            let src = self.nodes[p.0].value.data();
            for bi in 0..b {
                data[bi * t_len * d + t * d..bi * t_len * d + t * d + d]
                    .copy_from_slice(&src[bi * d..bi * d + d]);
            }
        }
        let value = Tensor::from_vec(vec![b, t_len, d], data)?;
        self.push_op(
            "stack_time",
            value,
            parts,
            Step::StackTime { parts: parts.to_vec() },
        )
    }

    /// Extracts timestep `t` from `[b,T,d]` as `[b,d]`.
    pub fn slice_time(&mut self, a: TensorId, t: usize) -> Result<TensorId> {
        let av = &self.nodes[a.0].value;
        if av.ndim() != 3 {
            return Err(Error::shape("slice_time", format!("expected rank 3, got {:?}", av.shape())));
        }
        let (b, t_len, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        if t >= t_len {
            return Err(Error::InvalidArgument(format!("timestep {} out of {}", t, t_len)));
        }
        let mut data = vec![0.0; b * d];
        for bi in 0..b {
            data[bi * d..bi * d + d]
                .copy_from_slice(&av.data()[bi * t_len * d + t * d..bi * t_len * d + t * d + d]);
        }
        let value = Tensor::from_vec(vec![b, d], data)?;
        self.push_op("slice_time", value, &[a], Step::SliceTime { a, t })
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let av = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != av.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", av.shape(), shape),
            ));
        }
        let value = Tensor::from_vec(shape, av.data().to_vec())?;
        self.push_op("reshape", value, &[a], Step::Reshape { a })
    }

    // ---- reductions ----

    fn mask_for(&self, op: &'static str, a: TensorId, axis: usize, mask: Option<TensorId>) -> Result<Option<Vec<f64>>> {
        let av = &self.nodes[a.0].value;
        let (outer, len, _inner) = axis_split(av.shape(), axis)?;
        match mask {
            None => Ok(None),
            Some(mid) => {
                let mv = &self.nodes[mid.0].value;
                if mv.numel() != outer * len {
                    return Err(Error::shape(
                        op,
                        format!(
                            "mask {:?} does not cover axis {} of {:?} (need {} values)",
                            mv.shape(),
                            axis,
                            av.shape(),
                            outer * len
                        ),
                    ));
                }
                if !mv.is_binary_mask() {
                    return Err(Error::InvalidArgument(format!("{op} mask must be 0/1")));
                }
                Ok(Some(mv.data().to_vec()))
            }
        }
    }

    /// Max along `axis`; positions where `mask == 0` are ignored. The mask
    /// covers the outer and reduced axes and broadcasts over inner axes.
    pub fn masked_max(&mut self, a: TensorId, axis: usize, mask: Option<TensorId>) -> Result<TensorId> {
        let maskv = self.mask_for("masked_max", a, axis, mask)?;
        let av = &self.nodes[a.0].value;
        let (outer, len, inner) = axis_split(av.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            let valid = |t: usize| maskv.as_ref().map_or(true, |m| m[o * len + t] != 0.0);
            if !(0..len).any(valid) {
                return Err(Error::DegenerateRow { op: "masked_max", row: o });
            }
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut best_t = usize::MAX;
                for t in 0..len {
                    if !valid(t) {
                        continue;
                    }
                    let v = av.data()[(o * len + t) * inner + i];
                    if best_t == usize::MAX || v > best {
                        best = v;
                        best_t = t;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = (o * len + best_t) * inner + i;
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::from_vec(shape, out)?;
        let mut parents = vec![a];
        parents.extend(mask);
        self.push_op("masked_max", value, &parents, Step::MaskedMax { a, argmax })
    }

    /// Mean along `axis`, dividing by the per-row mask count.
    pub fn masked_mean(&mut self, a: TensorId, axis: usize, mask: Option<TensorId>) -> Result<TensorId> {
        let maskv = self.mask_for("masked_mean", a, axis, mask)?;
        let av = &self.nodes[a.0].value;
        let (outer, len, inner) = axis_split(av.shape(), axis)?;
        let mut inv_counts = vec![0.0; outer];
        for o in 0..outer {
            let count = match &maskv {
                None => len as f64,
                Some(m) => m[o * len..(o + 1) * len].iter().sum(),
            };
            if count == 0.0 {
                return Err(Error::DegenerateRow { op: "masked_mean", row: o });
            }
            inv_counts[o] = 1.0 / count;
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                let keep = maskv.as_ref().map_or(1.0, |m| m[o * len + t]);
                if keep == 0.0 {
                    continue;
                }
                for i in 0..inner {
                    out[o * inner + i] += av.data()[(o * len + t) * inner + i] * inv_counts[o];
                }
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::from_vec(shape, out)?;
        let mut parents = vec![a];
        parents.extend(mask);
        self.push_op(
            "masked_mean",
            value,
            &parents,
            Step::MaskedMean { a, axis, mask, inv_counts },
        )
    }

    /// Softmax along `axis`; masked positions get exactly zero probability.
    pub fn softmax(&mut self, a: TensorId, axis: usize, mask: Option<TensorId>) -> Result<TensorId> {
        let maskv = self.mask_for("softmax", a, axis, mask)?;
        let av = &self.nodes[a.0].value;
        let (outer, len, inner) = axis_split(av.shape(), axis)?;
        let mut out = vec![0.0; av.numel()];
        for o in 0..outer {
            let valid = |t: usize| maskv.as_ref().map_or(true, |m| m[o * len + t] != 0.0);
            if !(0..len).any(valid) {
                return Err(Error::DegenerateRow { op: "softmax", row: o });
            }
            for i in 0..inner {
                let mut max = f64::NEG_INFINITY;
                for t in (0..len).filter(|&t| valid(t)) {
                    max = max.max(av.data()[(o * len + t) * inner + i]);
                }
                let mut sum = 0.0;
                for t in (0..len).filter(|&t| valid(t)) {
                    let e = (av.data()[(o * len + t) * inner + i] - max).exp();
                    out[(o * len + t) * inner + i] = e;
                    sum += e;
                }
                for t in (0..len).filter(|&t| valid(t)) {
                    out[(o * len + t) * inner + i] /= sum;
                }
            }
        }
        let value = Tensor::from_vec(av.shape().to_vec(), out)?;
        let mut parents = vec![a];
        parents.extend(mask);
        self.push_op("softmax", value, &parents, Step::Softmax { a, axis })
    }

    /// Log-softmax along `axis`. Masked positions hold 0.0 in the output and
    /// must never be gathered; they carry zero probability.
    pub fn log_softmax(&mut self, a: TensorId, axis: usize, mask: Option<TensorId>) -> Result<TensorId> {
        let maskv = self.mask_for("log_softmax", a, axis, mask)?;
        let av = &self.nodes[a.0].value;
        let (outer, len, inner) = axis_split(av.shape(), axis)?;
        let mut out = vec![0.0; av.numel()];
        let mut probs = vec![0.0; av.numel()];
        for o in 0..outer {
            let valid = |t: usize| maskv.as_ref().map_or(true, |m| m[o * len + t] != 0.0);
            if !(0..len).any(valid) {
                return Err(Error::DegenerateRow { op: "log_softmax", row: o });
            }
            for i in 0..inner {
                let mut max = f64::NEG_INFINITY;
                for t in (0..len).filter(|&t| valid(t)) {
                    max = max.max(av.data()[(o * len + t) * inner + i]);
                }
                let mut sum = 0.0;
                for t in (0..len).filter(|&t| valid(t)) {
                    sum += (av.data()[(o * len + t) * inner + i] - max).exp();
                }
                let log_z = max + sum.ln();
                for t in (0..len).filter(|&t| valid(t)) {
                    let idx = (o * len + t) * inner + i;
                    out[idx] = av.data()[idx] - log_z;
                    probs[idx] = out[idx].exp();
                }
            }
        }
        let value = Tensor::from_vec(av.shape().to_vec(), out)?;
        let mut parents = vec![a];
        parents.extend(mask);
        self.push_op("log_softmax", value, &parents, Step::LogSoftmax { a, axis, probs })
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let av = &self.nodes[a.0].value;
        let value = Tensor::scalar(av.data().iter().sum());
        self.push_op("sum_all", value, &[a], Step::SumAll { a, scale: 1.0 })
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let av = &self.nodes[a.0].value;
        if av.numel() == 0 {
            return Err(Error::EmptyBatch);
        }
        let n = av.numel() as f64;
        let value = Tensor::scalar(av.data().iter().sum::<f64>() / n);
        self.push_op("mean_all", value, &[a], Step::SumAll { a, scale: 1.0 / n })
    }

    /// Picks `a[i, indices[i]]` from a rank-2 tensor.
    pub fn gather(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let av = &self.nodes[a.0].value;
        if av.ndim() != 2 || av.shape()[0] != indices.len() {
            return Err(Error::shape(
                "gather",
                format!("{:?} with {} indices", av.shape(), indices.len()),
            ));
        }
        let cols = av.shape()[1];
        let mut data = Vec::with_capacity(indices.len());
        for (r, &c) in indices.iter().enumerate() {
            if c >= cols {
                return Err(Error::ClassIndexOutOfRange { index: c, classes: cols });
            }
            data.push(av.data()[r * cols + c]);
        }
        let value = Tensor::from_vec(vec![indices.len()], data)?;
        self.push_op(
            "gather",
            value,
            &[a],
            Step::Gather { a, indices: indices.to_vec() },
        )
    }

    // ---- dropout ----

    /// Inverted dropout. Evaluation mode and rate 0 are the identity.
    /// Variational dropout samples one mask per sequence of a `[b,T,d]` input
    /// and reuses it at every timestep.
    pub fn dropout(
        &mut self,
        kind: DropoutKind,
        a: TensorId,
        rate: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::DropoutRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let av = &self.nodes[a.0].value;
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = match kind {
            DropoutKind::Standard => (0..av.numel())
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
                .collect(),
            DropoutKind::Variational => {
                if av.ndim() != 3 {
                    return Err(Error::shape(
                        "dropout",
                        format!("variational dropout expects rank 3, got {:?}", av.shape()),
                    ));
                }
                let (b, t_len, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let per_seq: Vec<f64> = (0..b * d)
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
                    .collect();
                let mut full = vec![0.0; b * t_len * d];
                for bi in 0..b {
                    for t in 0..t_len {
                        full[bi * t_len * d + t * d..bi * t_len * d + t * d + d]
                            .copy_from_slice(&per_seq[bi * d..bi * d + d]);
                    }
                }
                full
            }
        };
        let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::from_vec(av.shape().to_vec(), data)?;
        self.push_op("dropout", value, &[a], Step::Dropout { a, mask })
    }

    // ---- losses ----

    /// Batch-mean loss. Regression kinds take gold values, cross-entropy takes
    /// class indices against `[b, classes]` logits.
    pub fn loss(&mut self, kind: LossKind, pred: TensorId, target: &LossTarget) -> Result<TensorId> {
        match (kind, target) {
            (LossKind::Mse, LossTarget::Values(vals)) => {
                let shape = self.shape_of(pred).to_vec();
                let t = self.constant(Tensor::from_vec(shape, vals.clone())?)?;
                let d = self.sub(pred, t)?;
                let sq = self.mul(d, d)?;
                self.mean_all(sq)
            }
            (LossKind::Mae, LossTarget::Values(vals)) => {
                let shape = self.shape_of(pred).to_vec();
                let t = self.constant(Tensor::from_vec(shape, vals.clone())?)?;
                let d = self.sub(pred, t)?;
                let ad = self.abs(d)?;
                self.mean_all(ad)
            }
            (LossKind::CrossEntropy, LossTarget::Classes(classes)) => {
                let lp = self.log_softmax(pred, 1, None)?;
                let picked = self.gather(lp, classes)?;
                let m = self.mean_all(picked)?;
                self.affine(m, -1.0, 0.0)
            }
            _ => Err(Error::InvalidArgument(format!(
                "loss kind {kind} does not match the provided target type"
            ))),
        }
    }

    // ---- backward ----

    /// Reverse-topological gradient accumulation from a scalar root.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::NonScalarRoot(self.nodes[root.0].value.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut work: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        work[root.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(dy) = work[idx].take() else { continue };
            self.propagate(idx, &dy, &mut work);
            let node = &mut self.nodes[idx];
            let grad = node.grad.get_or_insert_with(|| vec![0.0; node.value.numel()]);
            for (g, d) in grad.iter_mut().zip(&dy) {
                *g += d;
            }
        }
        Ok(())
    }

    fn stage<'a>(work: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: TensorId) -> Option<&'a mut Vec<f64>> {
        if !nodes[id.0].needs_grad {
            return None;
        }
        Some(work[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.numel()]))
    }

    fn propagate(&mut self, idx: usize, dy: &[f64], work: &mut [Option<Vec<f64>>]) {
        // Split borrows: steps only reference earlier nodes, values are read-only.
        let nodes = &self.nodes;
        match &nodes[idx].step {
            Step::Leaf => {}
            Step::Unary { a, kind } => {
                let y = nodes[idx].value.data();
                let x = nodes[a.0].value.data();
                if let Some(da) = Self::stage(work, nodes, *a) {
                    for i in 0..dy.len() {
                        let local = match kind {
                            UnaryKind::Tanh => 1.0 - y[i] * y[i],
                            UnaryKind::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            // subgradient 0 at the kink
                            UnaryKind::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        da[i] += dy[i] * local;
                    }
                }
            }
            Step::Add { a, b } => {
                let (a, b) = (*a, *b);
                if let Some(da) = Self::stage(work, nodes, a) {
                    for i in 0..dy.len() {
                        da[i] += dy[i];
                    }
                }
                if let Some(db) = Self::stage(work, nodes, b) {
                    for i in 0..dy.len() {
                        db[i] += dy[i];
                    }
                }
            }
            Step::Sub { a, b } => {
                let (a, b) = (*a, *b);
                if let Some(da) = Self::stage(work, nodes, a) {
                    for i in 0..dy.len() {
                        da[i] += dy[i];
                    }
                }
                if let Some(db) = Self::stage(work, nodes, b) {
                    for i in 0..dy.len() {
                        db[i] -= dy[i];
                    }
                }
            }
            Step::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(da) = Self::stage(work, nodes, a) {
                    for i in 0..dy.len() {
                        da[i] += dy[i] * bv[i];
                    }
                }
                if let Some(db) = Self::stage(work, nodes, b) {
                    for i in 0..dy.len() {
                        db[i] += dy[i] * av[i];
                    }
                }
            }
            Step::AddBias { a, bias } => {
                let (a, bias) = (*a, *bias);
                let width = nodes[bias.0].value.numel();
                if let Some(da) = Self::stage(work, nodes, a) {
                    for i in 0..dy.len() {
                        da[i] += dy[i];
                    }
                }
                if let Some(db) = Self::stage(work, nodes, bias) {
                    for i in 0..dy.len() {
                        db[i % width] += dy[i];
                    }
                }
            }
            Step::Affine { a, scale } => {
                let (a, scale) = (*a, *scale);
                if let Some(da) = Self::stage(work, nodes, a) {
                    for i in 0..dy.len() {
                        da[i] += dy[i] * scale;
                    }
                }
            }
            Step::MulScalar { a, s } => {
                let (a, s) = (*a, *s);
                let k = nodes[s.0].value.item();
                let av = nodes[a.0].value.data();
                if let Some(da) = Self::stage(work, nodes, a) {
                    for i in 0..dy.len() {
                        da[i] += dy[i] * k;
                    }
                }
                if let Some(ds) = Self::stage(work, nodes, s) {
                    ds[0] += dy.iter().zip(av).map(|(d, x)| d * x).sum::<f64>();
                }
            }
            Step::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(da) = Self::stage(work, nodes, a) {
                    mm_nt_acc(dy, bv, da, m, n, k); // dA = dC . B^T
                }
                if let Some(db) = Self::stage(work, nodes, b) {
                    mm_tn_acc(av, dy, db, k, m, n); // dB = A^T . dC
                }
            }
            Step::Bmm { a, b, rhs_transposed } => {
                let (a, b, tr) = (*a, *b, *rhs_transposed);
                let ashape = nodes[a.0].value.shape().to_vec();
                let (batch, m, k) = (ashape[0], ashape[1], ashape[2]);
                let n = if tr {
                    nodes[b.0].value.shape()[1]
                } else {
                    nodes[b.0].value.shape()[2]
                };
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let bstride = k * n;
                if let Some(da) = Self::stage(work, nodes, a) {
                    for i in 0..batch {
                        let dcs = &dy[i * m * n..(i + 1) * m * n];
                        let bs = &bv[i * bstride..(i + 1) * bstride];
                        let das = &mut da[i * m * k..(i + 1) * m * k];
                        if tr {
                            // C = A.B^T  =>  dA = dC . B   (B is [n,k])
                            mm_nn_acc(dcs, bs, das, m, n, k);
                        } else {
                            mm_nt_acc(dcs, bs, das, m, n, k);
                        }
                    }
                }
                if let Some(db) = Self::stage(work, nodes, b) {
                    for i in 0..batch {
                        let dcs = &dy[i * m * n..(i + 1) * m * n];
                        let as_ = &av[i * m * k..(i + 1) * m * k];
                        let dbs = &mut db[i * bstride..(i + 1) * bstride];
                        if tr {
                            // dB = dC^T . A  ([n,m].[m,k] -> [n,k])
                            mm_tn_acc(dcs, as_, dbs, n, m, k);
                        } else {
                            mm_tn_acc(as_, dcs, dbs, k, m, n);
                        }
                    }
                }
            }
            Step::ConcatLast { parts, widths } => {
                let parts = parts.clone();
                let widths = widths.clone();
                let total: usize = widths.iter().sum();
                let rows = dy.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if let Some(dp) = Self::stage(work, nodes, p) {
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += dy[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Step::StackTime { parts } => {
                let parts = parts.clone();
                let t_len = parts.len();
                let bd = nodes[parts[0].0].value.numel();
                let d = nodes[parts[0].0].value.shape()[1];
                let b = bd / d;
                for (t, &p) in parts.iter().enumerate() {
                    if let Some(dp) = Self::stage(work, nodes, p) {
                        for bi in 0..b {
                            for j in 0..d {
                                dp[bi * d + j] += dy[bi * t_len * d + t * d + j];
                            }
                        }
                    }
                }
            }
            Step::SliceTime { a, t } => {
                let (a, t) = (*a, *t);
                let shape = nodes[a.0].value.shape();
                let (b, t_len, d) = (shape[0], shape[1], shape[2]);
                if let Some(da) = Self::stage(work, nodes, a) {
                    for bi in 0..b {
                        for j in 0..d {
                            da[bi * t_len * d + t * d + j] += dy[bi * d + j];
                        }
                    }
                }
            }
            Step::Reshape { a } => {
                let a = *a;
                if let Some(da) = Self::stage(work, nodes, a) {
                    for i in 0..dy.len() {
                        da[i] += dy[i];
                    }
                }
            }
            Step::MaskedMax { a, argmax } => {
                let a = *a;
                let argmax = argmax.clone();
                if let Some(da) = Self::stage(work, nodes, a) {
                    for (p, &src) in argmax.iter().enumerate() {
                        da[src] += dy[p];
                    }
                }
            }
            Step::MaskedMean { a, axis, mask, inv_counts } => {
                let (a, axis, mask) = (*a, *axis, *mask);
                let inv_counts = inv_counts.clone();
                let (outer, len, inner) = axis_split(nodes[a.0].value.shape(), axis).expect("validated");
                let maskv = mask.map(|m| nodes[m.0].value.data().to_vec());
                if let Some(da) = Self::stage(work, nodes, a) {
                    for o in 0..outer {
                        for t in 0..len {
                            let keep = maskv.as_ref().map_or(1.0, |m| m[o * len + t]);
                            if keep == 0.0 {
                                continue;
                            }
                            for i in 0..inner {
                                da[(o * len + t) * inner + i] += dy[o * inner + i] * inv_counts[o];
                            }
                        }
                    }
                }
            }
            Step::Softmax { a, axis } => {
                let (a, axis) = (*a, *axis);
                let (outer, len, inner) = axis_split(nodes[idx].value.shape(), axis).expect("validated");
                let y = nodes[idx].value.data().to_vec();
                if let Some(da) = Self::stage(work, nodes, a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = 0.0;
                            for t in 0..len {
                                let p = (o * len + t) * inner + i;
                                dot += dy[p] * y[p];
                            }
                            for t in 0..len {
                                let p = (o * len + t) * inner + i;
                                da[p] += y[p] * (dy[p] - dot);
                            }
                        }
                    }
                }
            }
            Step::LogSoftmax { a, axis, probs } => {
                let (a, axis) = (*a, *axis);
                let probs = probs.clone();
                let (outer, len, inner) = axis_split(nodes[idx].value.shape(), axis).expect("validated");
                if let Some(da) = Self::stage(work, nodes, a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut sum = 0.0;
                            for t in 0..len {
                                let p = (o * len + t) * inner + i;
                                // masked positions hold probs == 0 and must not
                                // contribute upstream gradient
                                if probs[p] > 0.0 {
                                    sum += dy[p];
                                }
                            }
                            for t in 0..len {
                                let p = (o * len + t) * inner + i;
                                if probs[p] > 0.0 {
                                    da[p] += dy[p] - probs[p] * sum;
                                }
                            }
                        }
                    }
                }
            }
            Step::SumAll { a, scale } => {
                let (a, scale) = (*a, *scale);
                if let Some(da) = Self::stage(work, nodes, a) {
                    for v in da.iter_mut() {
                        *v += dy[0] * scale;
                    }
                }
            }
            Step::Gather { a, indices } => {
                let a = *a;
                let indices = indices.clone();
                let cols = nodes[a.0].value.shape()[1];
                if let Some(da) = Self::stage(work, nodes, a) {
                    for (r, &c) in indices.iter().enumerate() {
                        da[r * cols + c] += dy[r];
                    }
                }
            }
            Step::Dropout { a, mask } => {
                let a = *a;
                let mask = mask.clone();
                if let Some(da) = Self::stage(work, nodes, a) {
                    for i in 0..dy.len() {
                        da[i] += dy[i] * mask[i];
                    }
                }
            }
        }
    }
}

/// Target values for [`Graph::loss`].
pub enum LossTarget {
    Values(Vec<f64>),
    Classes(Vec<usize>),
}

// out[m,n] += a[m,k] . b[k,n]
fn mm_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

// out[m,n] += a[m,k] . b[n,k]^T  (dot products of rows)
fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[m,n] += a[k,m]^T . b[k,n]
fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aki * brow[j];
            }
        }
    }
}
