//! Arena-based computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the arena index order is a
//! topological order and the backward pass is a single reverse sweep.
//! Reductions use pairwise-tree summation so results never depend on a
//! parallelism degree.

use super::{pairwise_sum, Scalar, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Producing operation of a node. Attributes live here; parent node ids are
/// stored on the node record.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Reshape,
    Transpose { perm: Vec<usize> },
    Concat { axis: usize },
    Slice { starts: Vec<usize>, lens: Vec<usize> },
    Broadcast,
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Softmax { axis: usize },
    Tanh,
    Sigmoid,
    Silu,
    LayerNorm { eps: f64 },
    Conv2d { stride: usize, pad: usize },
    AvgPool2d { k: usize },
    UpsampleNearest { factor: usize },
    EmbeddingLookup { ids: Vec<usize> },
    LinearInterp1d,
}

struct NodeRec<S> {
    value: Tensor<S>,
    op: Op,
    parents: Vec<NodeId>,
    requires_grad: bool,
}

/// Per-node gradients produced by a backward sweep.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Graph<S> {
    nodes: Vec<NodeRec<S>>,
    checked: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new(false)
    }
}

impl<S: Scalar> Graph<S> {
    /// `checked` rejects non-finite op inputs and is meant for verification
    /// runs; training leaves it off.
    pub fn new(checked: bool) -> Self {
        Graph { nodes: Vec::new(), checked }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, vec![], requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<S>, op: Op, parents: Vec<NodeId>, requires_grad: bool) -> NodeId {
        self.nodes.push(NodeRec { value, op, parents, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn check_finite(&self, op: &'static str, inputs: &[NodeId]) -> Result<()> {
        if self.checked {
            for &id in inputs {
                if !self.nodes[id.0].value.all_finite() {
                    return Err(Error::NonFinite { op });
                }
            }
        }
        Ok(())
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Element-wise binary ──────────────────────────────────────────

    fn ewise(&mut self, op: Op, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(S, S) -> S) -> Result<NodeId> {
        self.check_finite(name, &[a, b])?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data: Vec<S> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, vec![a, b], rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ewise(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ewise(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ewise(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    // ── Matmul ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_finite("matmul", &[a, b])?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let value = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul, vec![a, b], rg))
    }

    // ── Shape ops ────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", ta.shape(), shape),
            });
        }
        let value = Tensor::new(shape.to_vec(), ta.data().to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape, vec![a], rg))
    }

    pub fn transpose(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let r = ta.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("perm {perm:?} for rank {r}"),
            });
        }
        let value = transpose_raw(ta, perm);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose { perm: perm.to_vec() }, vec![a], rg))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat", detail: "no inputs".into() });
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: format!("axis {axis} for rank {}", first.len()),
            });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &id in inputs {
            let s = self.nodes[id.0].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (&a, &b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("{s:?} vs {first:?} along {axis}"),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![S::zero(); out_shape.iter().product()];
        let out_axis = out_shape[axis];
        let mut offset = 0usize;
        for &id in inputs {
            let t = &self.nodes[id.0].value;
            let ax = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * ax * inner..(o + 1) * ax * inner];
                let dst_start = (o * out_axis + offset) * inner;
                data[dst_start..dst_start + ax * inner].copy_from_slice(src);
            }
            offset += ax;
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, Op::Concat { axis }, inputs.to_vec(), rg))
    }

    pub fn slice(&mut self, a: NodeId, starts: &[usize], lens: &[usize]) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let r = ta.rank();
        if starts.len() != r || lens.len() != r {
            return Err(Error::ShapeMismatch {
                op: "slice",
                detail: format!("starts/lens rank {} vs tensor rank {r}", starts.len()),
            });
        }
        for d in 0..r {
            if lens[d] == 0 || starts[d] + lens[d] > ta.shape()[d] {
                return Err(Error::ShapeMismatch {
                    op: "slice",
                    detail: format!("axis {d}: {}+{} > {}", starts[d], lens[d], ta.shape()[d]),
                });
            }
        }
        let value = slice_raw(ta, starts, lens);
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            value,
            Op::Slice { starts: starts.to_vec(), lens: lens.to_vec() },
            vec![a],
            rg,
        ))
    }

    /// Numpy-style broadcast of `a` to `shape` (trailing-axis alignment;
    /// source extents must be 1 or equal).
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let src = ta.shape();
        if src.len() > shape.len() {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                detail: format!("{src:?} -> {shape:?}"),
            });
        }
        let offset = shape.len() - src.len();
        for d in 0..src.len() {
            if src[d] != 1 && src[d] != shape[offset + d] {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    detail: format!("{src:?} -> {shape:?} at axis {d}"),
                });
            }
        }
        let value = broadcast_raw(ta, shape);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Broadcast, vec![a], rg))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.check_finite("sum", &[a])?;
        let ta = &self.nodes[a.0].value;
        let value = reduce_raw(ta, axis, false)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Sum { axis }, vec![a], rg))
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.check_finite("mean", &[a])?;
        let ta = &self.nodes[a.0].value;
        let value = reduce_raw(ta, axis, true)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Mean { axis }, vec![a], rg))
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    fn unary(&mut self, op: Op, name: &'static str, a: NodeId, f: impl Fn(S) -> S) -> Result<NodeId> {
        self.check_finite(name, &[a])?;
        let value = self.nodes[a.0].value.map(f);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, op, vec![a], rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Tanh, "tanh", a, |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, "sigmoid", a, sigmoid_s)
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Silu, "silu", a, |x| x * sigmoid_s(x))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_finite("softmax", &[a])?;
        let ta = &self.nodes[a.0].value;
        if axis >= ta.rank() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {axis} for rank {}", ta.rank()),
            });
        }
        let mut data = ta.data().to_vec();
        let (n, stride) = (ta.shape()[axis], ta.strides()[axis]);
        if stride == 1 {
            // Last-axis lanes are contiguous rows; normalize them in
            // parallel (each row is one task, results are order-free).
            data.par_chunks_mut(n).for_each(softmax_lane);
        } else {
            let mut lane = vec![S::zero(); n];
            for_each_lane(ta.shape(), axis, |base| {
                for i in 0..n {
                    lane[i] = data[base + i * stride];
                }
                softmax_lane(&mut lane);
                for i in 0..n {
                    data[base + i * stride] = lane[i];
                }
            });
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax { axis }, vec![a], rg))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.check_finite("layer_norm", &[x, gamma, beta])?;
        let tx = &self.nodes[x.0].value;
        let n = *tx.shape().last().expect("rank >= 1");
        let tg = &self.nodes[gamma.0].value;
        let tb = &self.nodes[beta.0].value;
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            });
        }
        let mut data = vec![S::zero(); tx.numel()];
        let epss = S::from_f64(eps);
        let inv_n = S::one() / S::from_f64(n as f64);
        for lane in 0..tx.numel() / n {
            let xs = &tx.data()[lane * n..(lane + 1) * n];
            let mu = pairwise_sum(xs) * inv_n;
            let centered: Vec<S> = xs.iter().map(|&v| v - mu).collect();
            let var = pairwise_sum(&centered.iter().map(|&c| c * c).collect::<Vec<_>>()) * inv_n;
            let inv_std = S::one() / (var + epss).sqrt();
            for i in 0..n {
                data[lane * n + i] = centered[i] * inv_std * tg.data()[i] + tb.data()[i];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { eps }, vec![x, gamma, beta], rg))
    }

    // ── Spatial ops ──────────────────────────────────────────────────

    /// 2-D convolution: x `[Cin,H,W]`, w `[Cout,Cin,kh,kw]`, b `[Cout]`,
    /// zero padding `pad`, stride `stride`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.check_finite("conv2d", &[x, w, b])?;
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        let tb = &self.nodes[b.0].value;
        if tx.rank() != 3 || tw.rank() != 4 || tb.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            });
        }
        let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, wcin, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if wcin != cin || tb.shape()[0] != cout || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {:?}, w {:?}, b {:?}, stride {stride}", tx.shape(), tw.shape(), tb.shape()),
            });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{wd}+{pad}"),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let value = conv2d_forward(tx, tw, tb, stride, pad, ho, wo);
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { stride, pad }, vec![x, w, b], rg))
    }

    /// Non-overlapping k x k average pooling; spatial extents must divide k.
    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        self.check_finite("avg_pool2d", &[x])?;
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 3 || k == 0 || tx.shape()[1] % k != 0 || tx.shape()[2] % k != 0 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2d",
                detail: format!("x {:?}, k {k}", tx.shape()),
            });
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (ho, wo) = (h / k, w / k);
        let inv = S::one() / S::from_f64((k * k) as f64);
        let mut data = vec![S::zero(); c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = S::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += tx.data()[(ci * h + oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    data[(ci * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::AvgPool2d { k }, vec![x], rg))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        self.check_finite("upsample_nearest", &[x])?;
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 3 || factor == 0 {
            return Err(Error::ShapeMismatch {
                op: "upsample_nearest",
                detail: format!("x {:?}, factor {factor}", tx.shape()),
            });
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (ho, wo) = (h * factor, w * factor);
        let mut data = vec![S::zero(); c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for x2 in 0..wo {
                    data[(ci * ho + y) * wo + x2] = tx.data()[(ci * h + y / factor) * w + x2 / factor];
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::UpsampleNearest { factor }, vec![x], rg))
    }

    // ── Lookup / interpolation ───────────────────────────────────────

    /// Row gather: table `[V,d]`, ids -> `[len(ids), d]`.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.check_finite("embedding_lookup", &[table])?;
        let tt = &self.nodes[table.0].value;
        if tt.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding_lookup",
                detail: format!("table {:?}", tt.shape()),
            });
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if ids.is_empty() {
            return Err(Error::ShapeMismatch { op: "embedding_lookup", detail: "empty id list".into() });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::UnknownClass(bad as u32));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(value, Op::EmbeddingLookup { ids: ids.to_vec() }, vec![table], rg))
    }

    /// Linear interpolation along the row axis of `values` `[N,d]` at
    /// continuous positions `[M]` (clamped to `[0, N-1]`) -> `[M,d]`.
    /// Differentiable in both values and positions.
    pub fn linear_interp_1d(&mut self, values: NodeId, positions: NodeId) -> Result<NodeId> {
        self.check_finite("linear_interp_1d", &[values, positions])?;
        let tv = &self.nodes[values.0].value;
        let tp = &self.nodes[positions.0].value;
        if tv.rank() != 2 || tp.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "linear_interp_1d",
                detail: format!("values {:?}, positions {:?}", tv.shape(), tp.shape()),
            });
        }
        let (n, d) = (tv.shape()[0], tv.shape()[1]);
        let m = tp.shape()[0];
        let mut data = vec![S::zero(); m * d];
        for i in 0..m {
            let (lo, frac) = interp_coords(tp.data()[i], n);
            let hi = (lo + 1).min(n - 1);
            for j in 0..d {
                data[i * d + j] =
                    (S::one() - frac) * tv.data()[lo * d + j] + frac * tv.data()[hi * d + j];
            }
        }
        let value = Tensor::new(vec![m, d], data)?;
        let rg = self.any_grad(&[values, positions]);
        Ok(self.push(value, Op::LinearInterp1d, vec![values, positions], rg))
    }

    // ── Composites ───────────────────────────────────────────────────

    /// Multiply by a compile-time constant via constant-leaf broadcast.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.nodes[a.0].value.shape().to_vec();
        let k = self.constant(Tensor::scalar(S::from_f64(c)));
        let kb = self.broadcast(k, &shape)?;
        self.mul(a, kb)
    }

    /// Scaled dot-product attention composed from primitive ops:
    /// softmax(q kᵀ / sqrt(d)) v  for q `[Tq,d]`, k `[Tk,d]`, v `[Tk,dv]`.
    pub fn scaled_dot_attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let d = {
            let tq = &self.nodes[q.0].value;
            if tq.rank() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "scaled_dot_attention",
                    detail: format!("q {:?}", tq.shape()),
                });
            }
            tq.shape()[1]
        };
        let kt = self.transpose(k, &[1, 0])?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        let probs = self.softmax(scaled, 1)?;
        self.matmul(probs, v)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients are accumulated
    /// additively; nodes that do not require a gradient are skipped.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let lt = &self.nodes[loss.0].value;
        if lt.shape() != [1] {
            return Err(Error::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.accumulate_parents(i, &gy, &mut grads);
            // Leaf gradients are the sweep's output; interior grads are
            // dropped once consumed.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(&self, i: usize, gy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let rec = &self.nodes[i];
        let parents = &rec.parents;
        let mut contribute = |pid: NodeId, g: Tensor<S>| {
            if !self.nodes[pid.0].requires_grad {
                return;
            }
            match &mut grads[pid.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                slot => *slot = Some(g),
            }
        };
        match &rec.op {
            Op::Leaf => {}
            Op::Add => {
                contribute(parents[0], gy.clone());
                contribute(parents[1], gy.clone());
            }
            Op::Sub => {
                contribute(parents[0], gy.clone());
                contribute(parents[1], gy.map(|v| -v));
            }
            Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                if self.nodes[a.0].requires_grad {
                    contribute(a, zip_mul(gy, &self.nodes[b.0].value));
                }
                if self.nodes[b.0].requires_grad {
                    contribute(b, zip_mul(gy, &self.nodes[a.0].value));
                }
            }
            Op::MatMul => {
                let (a, b) = (parents[0], parents[1]);
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = dC Bᵀ, dB = Aᵀ dC, both transpose-free.
                if self.nodes[a.0].requires_grad {
                    let da = matmul_nt(gy.data(), tb.data(), m, n, k);
                    contribute(a, Tensor::new(vec![m, k], da).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_tn(ta.data(), gy.data(), m, k, n);
                    contribute(b, Tensor::new(vec![k, n], db).expect("shape"));
                }
            }
            Op::Reshape => {
                let src_shape = self.nodes[parents[0].0].value.shape().to_vec();
                contribute(parents[0], Tensor::new(src_shape, gy.data().to_vec()).expect("shape"));
            }
            Op::Transpose { perm } => {
                let inv = invert_perm(perm);
                contribute(parents[0], transpose_raw(gy, &inv));
            }
            Op::Concat { axis } => {
                let mut start = 0usize;
                for &pid in parents {
                    let ps = self.nodes[pid.0].value.shape().to_vec();
                    let mut starts = vec![0usize; ps.len()];
                    starts[*axis] = start;
                    start += ps[*axis];
                    contribute(pid, slice_raw(gy, &starts, &ps));
                }
            }
            Op::Slice { starts, lens } => {
                let src = &self.nodes[parents[0].0].value;
                let mut g = Tensor::zeros(src.shape());
                scatter_slice(&mut g, gy, starts, lens);
                contribute(parents[0], g);
            }
            Op::Broadcast => {
                let src_shape = self.nodes[parents[0].0].value.shape().to_vec();
                contribute(parents[0], reduce_broadcast(gy, &src_shape));
            }
            Op::Sum { axis } => {
                let src = &self.nodes[parents[0].0].value;
                contribute(parents[0], spread_reduce(gy, src.shape(), *axis, None));
            }
            Op::Mean { axis } => {
                let src = &self.nodes[parents[0].0].value;
                let n = match axis {
                    None => src.numel(),
                    Some(a) => src.shape()[*a],
                };
                contribute(parents[0], spread_reduce(gy, src.shape(), *axis, Some(n)));
            }
            Op::Softmax { axis } => {
                let y = &rec.value;
                let (n, stride) = (y.shape()[*axis], y.strides()[*axis]);
                let mut g = vec![S::zero(); y.numel()];
                if stride == 1 {
                    g.par_chunks_mut(n).enumerate().for_each(|(lane, gl)| {
                        let ys = &y.data()[lane * n..(lane + 1) * n];
                        let gys = &gy.data()[lane * n..(lane + 1) * n];
                        let prods: Vec<S> = ys.iter().zip(gys).map(|(&a, &b)| a * b).collect();
                        let dot = pairwise_sum(&prods);
                        for i in 0..n {
                            gl[i] = ys[i] * (gys[i] - dot);
                        }
                    });
                } else {
                    let mut lane_y = vec![S::zero(); n];
                    let mut lane_g = vec![S::zero(); n];
                    for_each_lane(y.shape(), *axis, |base| {
                        for i in 0..n {
                            lane_y[i] = y.data()[base + i * stride];
                            lane_g[i] = gy.data()[base + i * stride];
                        }
                        let dot = pairwise_sum(
                            &lane_y.iter().zip(&lane_g).map(|(&a, &b)| a * b).collect::<Vec<_>>(),
                        );
                        for i in 0..n {
                            g[base + i * stride] = lane_y[i] * (lane_g[i] - dot);
                        }
                    });
                }
                contribute(parents[0], Tensor::new(y.shape().to_vec(), g).expect("shape"));
            }
            Op::Tanh => {
                let y = &rec.value;
                let g: Vec<S> = y
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&y, &g)| g * (S::one() - y * y))
                    .collect();
                contribute(parents[0], Tensor::new(y.shape().to_vec(), g).expect("shape"));
            }
            Op::Sigmoid => {
                let y = &rec.value;
                let g: Vec<S> = y
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&y, &g)| g * y * (S::one() - y))
                    .collect();
                contribute(parents[0], Tensor::new(y.shape().to_vec(), g).expect("shape"));
            }
            Op::Silu => {
                let x = &self.nodes[parents[0].0].value;
                let g: Vec<S> = x
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&x, &g)| {
                        let s = sigmoid_s(x);
                        g * s * (S::one() + x * (S::one() - s))
                    })
                    .collect();
                contribute(parents[0], Tensor::new(x.shape().to_vec(), g).expect("shape"));
            }
            Op::LayerNorm { eps } => {
                let (gx, gg, gb) = layer_norm_backward(
                    &self.nodes[parents[0].0].value,
                    &self.nodes[parents[1].0].value,
                    gy,
                    *eps,
                );
                contribute(parents[0], gx);
                contribute(parents[1], gg);
                contribute(parents[2], gb);
            }
            Op::Conv2d { stride, pad } => {
                let x = &self.nodes[parents[0].0].value;
                let w = &self.nodes[parents[1].0].value;
                let (gx, gw, gb) = conv2d_backward(x, w, gy, *stride, *pad);
                contribute(parents[0], gx);
                contribute(parents[1], gw);
                contribute(parents[2], gb);
            }
            Op::AvgPool2d { k } => {
                let x = &self.nodes[parents[0].0].value;
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (ho, wo) = (h / k, w / k);
                let inv = S::one() / S::from_f64((k * k) as f64);
                let mut g = vec![S::zero(); x.numel()];
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gy.data()[(ci * ho + oy) * wo + ox] * inv;
                            for dy in 0..*k {
                                for dx in 0..*k {
                                    g[(ci * h + oy * k + dy) * w + ox * k + dx] += gv;
                                }
                            }
                        }
                    }
                }
                contribute(parents[0], Tensor::new(x.shape().to_vec(), g).expect("shape"));
            }
            Op::UpsampleNearest { factor } => {
                let x = &self.nodes[parents[0].0].value;
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (ho, wo) = (h * factor, w * factor);
                let mut g = vec![S::zero(); x.numel()];
                for ci in 0..c {
                    for y in 0..ho {
                        for x2 in 0..wo {
                            g[(ci * h + y / factor) * w + x2 / factor] +=
                                gy.data()[(ci * ho + y) * wo + x2];
                        }
                    }
                }
                contribute(parents[0], Tensor::new(x.shape().to_vec(), g).expect("shape"));
            }
            Op::EmbeddingLookup { ids } => {
                let t = &self.nodes[parents[0].0].value;
                let d = t.shape()[1];
                let mut g = vec![S::zero(); t.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[id * d + j] += gy.data()[row * d + j];
                    }
                }
                contribute(parents[0], Tensor::new(t.shape().to_vec(), g).expect("shape"));
            }
            Op::LinearInterp1d => {
                let tv = &self.nodes[parents[0].0].value;
                let tp = &self.nodes[parents[1].0].value;
                let (n, d) = (tv.shape()[0], tv.shape()[1]);
                let m = tp.shape()[0];
                let mut gv = vec![S::zero(); tv.numel()];
                let mut gp = vec![S::zero(); m];
                for i in 0..m {
                    let (lo, frac) = interp_coords(tp.data()[i], n);
                    let hi = (lo + 1).min(n - 1);
                    let mut dpos = S::zero();
                    for j in 0..d {
                        let g = gy.data()[i * d + j];
                        gv[lo * d + j] += (S::one() - frac) * g;
                        gv[hi * d + j] += frac * g;
                        dpos += (tv.data()[hi * d + j] - tv.data()[lo * d + j]) * g;
                    }
                    // Zero slope outside the clamp range and for a single row.
                    let p = tp.data()[i];
                    let inside = n > 1 && p.to_f64() > 0.0 && p.to_f64() < (n - 1) as f64;
                    gp[i] = if inside { dpos } else { S::zero() };
                }
                contribute(parents[0], Tensor::new(tv.shape().to_vec(), gv).expect("shape"));
                contribute(parents[1], Tensor::new(vec![m], gp).expect("shape"));
            }
        }
    }
}

// ── Kernels ──────────────────────────────────────────────────────────

fn sigmoid_s<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    let row_kernel = |i: usize, row: &mut [S]| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * br[j];
            }
        }
    };
    if m * k * n < 1 << 15 {
        for (i, row) in c.chunks_mut(n).enumerate() {
            row_kernel(i, row);
        }
    } else {
        // Parallel over output rows; each row is written by exactly one
        // task, so the result is independent of the thread count.
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| row_kernel(i, row));
    }
    c
}

/// C = A Bᵀ for A `[m,n]`, B `[k,n]`: row-dot form, no materialized
/// transpose.
fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * k];
    let row_kernel = |i: usize, row: &mut [S]| {
        let ar = &a[i * n..(i + 1) * n];
        for (j, slot) in row.iter_mut().enumerate() {
            let br = &b[j * n..(j + 1) * n];
            let mut acc = S::zero();
            for p in 0..n {
                acc += ar[p] * br[p];
            }
            *slot = acc;
        }
    };
    if m * n * k < 1 << 15 {
        for (i, row) in c.chunks_mut(k).enumerate() {
            row_kernel(i, row);
        }
    } else {
        c.par_chunks_mut(k).enumerate().for_each(|(i, row)| row_kernel(i, row));
    }
    c
}

/// C = Aᵀ B for A `[m,k]`, B `[m,n]`: rank-1 accumulation over rows of A,
/// no materialized transpose.
fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    if m * n * k < 1 << 15 {
        for i in 0..m {
            let br = &b[i * n..(i + 1) * n];
            for j in 0..k {
                let av = a[i * k + j];
                let row = &mut c[j * n..(j + 1) * n];
                for p in 0..n {
                    row[p] += av * br[p];
                }
            }
        }
    } else {
        // Split output rows across tasks; each task scans all of A and B
        // but writes a disjoint row band.
        let bands = rayon::current_num_threads().max(1);
        let band = k.div_ceil(bands);
        c.par_chunks_mut(band * n).enumerate().for_each(|(bi, slab)| {
            let j0 = bi * band;
            let rows = slab.len() / n;
            for i in 0..m {
                let br = &b[i * n..(i + 1) * n];
                for dj in 0..rows {
                    let av = a[i * k + j0 + dj];
                    let row = &mut slab[dj * n..(dj + 1) * n];
                    for p in 0..n {
                        row[p] += av * br[p];
                    }
                }
            }
        });
    }
    c
}

fn transpose_raw<S: Scalar>(t: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let src_shape = t.shape();
    let src_strides = t.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let mut data = vec![S::zero(); t.numel()];
    let mut idx = vec![0usize; out_shape.len()];
    for slot in data.iter_mut() {
        let mut src_off = 0;
        for (d, &i) in idx.iter().enumerate() {
            src_off += i * src_strides[perm[d]];
        }
        *slot = t.data()[src_off];
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("shape")
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn slice_raw<S: Scalar>(t: &Tensor<S>, starts: &[usize], lens: &[usize]) -> Tensor<S> {
    let strides = t.strides();
    let mut data = vec![S::zero(); lens.iter().product()];
    let mut idx = vec![0usize; lens.len()];
    for slot in data.iter_mut() {
        let mut off = 0;
        for d in 0..lens.len() {
            off += (starts[d] + idx[d]) * strides[d];
        }
        *slot = t.data()[off];
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < lens[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(lens.to_vec(), data).expect("shape")
}

fn scatter_slice<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>, starts: &[usize], lens: &[usize]) {
    let strides = dst.strides();
    let mut idx = vec![0usize; lens.len()];
    for &v in src.data() {
        let mut off = 0;
        for d in 0..lens.len() {
            off += (starts[d] + idx[d]) * strides[d];
        }
        dst.data_mut()[off] += v;
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < lens[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn broadcast_raw<S: Scalar>(t: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if t.numel() == 1 {
        return Tensor::full(shape, t.item());
    }
    if t.shape() == shape {
        return Tensor::new(shape.to_vec(), t.data().to_vec()).expect("shape");
    }
    let offset = shape.len() - t.rank();
    let src_shape = t.shape();
    let src_strides = t.strides();
    let mut data = vec![S::zero(); shape.iter().product()];
    let mut idx = vec![0usize; shape.len()];
    for slot in data.iter_mut() {
        let mut off = 0;
        for d in offset..shape.len() {
            let sd = d - offset;
            if src_shape[sd] != 1 {
                off += idx[d] * src_strides[sd];
            }
        }
        *slot = t.data()[off];
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Sum `gy` back down to `src_shape` (inverse of a numpy-style broadcast).
fn reduce_broadcast<S: Scalar>(gy: &Tensor<S>, src_shape: &[usize]) -> Tensor<S> {
    let src_numel: usize = src_shape.iter().product();
    if src_numel == 1 {
        return Tensor::new(src_shape.to_vec(), vec![pairwise_sum(gy.data())]).expect("shape");
    }
    if gy.shape() == src_shape {
        return Tensor::new(src_shape.to_vec(), gy.data().to_vec()).expect("shape");
    }
    let offset = gy.rank() - src_shape.len();
    let mut g = Tensor::zeros(src_shape);
    let src_strides = g.strides();
    let out_shape = gy.shape().to_vec();
    let mut idx = vec![0usize; out_shape.len()];
    for &v in gy.data() {
        let mut off = 0;
        for d in offset..out_shape.len() {
            let sd = d - offset;
            if src_shape[sd] != 1 {
                off += idx[d] * src_strides[sd];
            }
        }
        g.data_mut()[off] += v;
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    g
}

fn reduce_raw<S: Scalar>(t: &Tensor<S>, axis: Option<usize>, mean: bool) -> Result<Tensor<S>> {
    match axis {
        None => {
            let mut v = pairwise_sum(t.data());
            if mean {
                v = v / S::from_f64(t.numel() as f64);
            }
            Ok(Tensor::scalar(v))
        }
        Some(a) => {
            if a >= t.rank() {
                return Err(Error::ShapeMismatch {
                    op: if mean { "mean" } else { "sum" },
                    detail: format!("axis {a} for rank {}", t.rank()),
                });
            }
            let n = t.shape()[a];
            let stride = t.strides()[a];
            let mut out_shape: Vec<usize> = t
                .shape()
                .iter()
                .enumerate()
                .filter(|&(d, _)| d != a)
                .map(|(_, &e)| e)
                .collect();
            if out_shape.is_empty() {
                out_shape.push(1);
            }
            let mut data = Vec::with_capacity(t.numel() / n);
            let mut lane = vec![S::zero(); n];
            for_each_lane(t.shape(), a, |base| {
                for i in 0..n {
                    lane[i] = t.data()[base + i * stride];
                }
                let mut v = pairwise_sum(&lane);
                if mean {
                    v = v / S::from_f64(n as f64);
                }
                data.push(v);
            });
            Ok(Tensor::new(out_shape, data)?)
        }
    }
}

/// Backward of sum/mean: spread `gy` across the reduced extent, divided by
/// `div` for mean.
fn spread_reduce<S: Scalar>(
    gy: &Tensor<S>,
    src_shape: &[usize],
    axis: Option<usize>,
    div: Option<usize>,
) -> Tensor<S> {
    let scale = match div {
        None => S::one(),
        Some(n) => S::one() / S::from_f64(n as f64),
    };
    match axis {
        None => {
            let v = gy.item() * scale;
            Tensor::full(src_shape, v)
        }
        Some(a) => {
            let mut g = Tensor::zeros(src_shape);
            let n = src_shape[a];
            let stride = g.strides()[a];
            let mut lane_idx = 0usize;
            for_each_lane(src_shape, a, |base| {
                let v = gy.data()[lane_idx] * scale;
                lane_idx += 1;
                for i in 0..n {
                    g.data_mut()[base + i * stride] = v;
                }
            });
            g
        }
    }
}

/// Visit the base offset of every 1-D lane along `axis`, in row-major order
/// of the remaining axes.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize)) {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let rest: Vec<usize> = (0..shape.len()).filter(|&d| d != axis).collect();
    let lanes: usize = rest.iter().map(|&d| shape[d]).product();
    let mut idx = vec![0usize; rest.len()];
    for _ in 0..lanes {
        let mut base = 0;
        for (slot, &d) in rest.iter().enumerate() {
            base += idx[slot] * strides[d];
        }
        f(base);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[rest[d]] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn softmax_lane<S: Scalar>(lane: &mut [S]) {
    let mut max = lane[0];
    for &v in lane.iter() {
        max = max.max_s(v);
    }
    for v in lane.iter_mut() {
        *v = (*v - max).exp();
    }
    let denom = pairwise_sum(lane);
    for v in lane.iter_mut() {
        *v = *v / denom;
    }
}

fn zip_mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
    )
    .expect("shape")
}

fn interp_coords<S: Scalar>(p: S, n: usize) -> (usize, S) {
    if n == 1 {
        return (0, S::zero());
    }
    let max = S::from_f64((n - 1) as f64);
    let p = p.max_s(S::zero()).min_s(max);
    let lo_f = p.floor();
    let lo = (lo_f.to_f64() as usize).min(n - 2);
    let frac = p - S::from_f64(lo as f64);
    (lo, frac)
}

fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor<S> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let mut data = vec![S::zero(); cout * ho * wo];
    // Shift-and-accumulate: for each fixed (ci, ky, kx) the update along a
    // row is a strided mad over contiguous input, which vectorizes.
    let plane_kernel = |co: usize, plane: &mut [S]| {
        for v in plane.iter_mut() {
            *v = b.data()[co];
        }
        for ci in 0..cin {
            for ky in 0..kh {
                let wrow = ((co * cin + ci) * kh + ky) * kw;
                for kx in 0..kw {
                    if kx >= wd + pad {
                        continue;
                    }
                    let wv = w.data()[wrow + kx];
                    // ox·stride + kx ∈ [pad, wd + pad): valid ox range.
                    let ox_lo = pad.saturating_sub(kx).div_ceil(stride);
                    let ox_hi = (((wd + pad - kx - 1) / stride) + 1).min(wo);
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let xrow = &x.data()[(ci * h + iy - pad) * wd..(ci * h + iy - pad + 1) * wd];
                        let out_row = &mut plane[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let shift = kx as isize - pad as isize;
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * xrow[(ox as isize + shift) as usize];
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * xrow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    };
    if cout * ho * wo * cin * kh * kw < 1 << 15 {
        for (co, plane) in data.chunks_mut(ho * wo).enumerate() {
            plane_kernel(co, plane);
        }
    } else {
        data.par_chunks_mut(ho * wo).enumerate().for_each(|(co, plane)| plane_kernel(co, plane));
    }
    Tensor::new(vec![cout, ho, wo], data).expect("shape")
}

fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gy: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (gy.shape()[1], gy.shape()[2]);

    let mut gb = vec![S::zero(); cout];
    for co in 0..cout {
        gb[co] = pairwise_sum(&gy.data()[co * ho * wo..(co + 1) * ho * wo]);
    }

    let work = cout * ho * wo * cin * kh * kw;
    // Valid ox range for a given kx: ox·stride + kx ∈ [pad, wd + pad).
    let ox_range = |kx: usize| -> (usize, usize) {
        if kx >= wd + pad {
            return (0, 0);
        }
        let lo = pad.saturating_sub(kx).div_ceil(stride);
        let hi = (((wd + pad - kx - 1) / stride) + 1).min(wo);
        (lo, hi.max(lo))
    };

    let mut gw = vec![S::zero(); w.numel()];
    let gw_kernel = |co: usize, wslab: &mut [S]| {
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = ox_range(kx);
                    let mut acc = S::zero();
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let xrow = &x.data()[(ci * h + iy - pad) * wd..(ci * h + iy - pad + 1) * wd];
                        let gyrow = &gy.data()[(co * ho + oy) * wo..(co * ho + oy + 1) * wo];
                        for ox in ox_lo..ox_hi {
                            acc += gyrow[ox] * xrow[ox * stride + kx - pad];
                        }
                    }
                    wslab[(ci * kh + ky) * kw + kx] = acc;
                }
            }
        }
    };
    if work < 1 << 15 {
        for (co, wslab) in gw.chunks_mut(cin * kh * kw).enumerate() {
            gw_kernel(co, wslab);
        }
    } else {
        gw.par_chunks_mut(cin * kh * kw).enumerate().for_each(|(co, wslab)| gw_kernel(co, wslab));
    }

    let mut gx = vec![S::zero(); x.numel()];
    let gx_kernel = |ci: usize, xslab: &mut [S]| {
        for co in 0..cout {
            for ky in 0..kh {
                let wrow = ((co * cin + ci) * kh + ky) * kw;
                for kx in 0..kw {
                    let wv = w.data()[wrow + kx];
                    let (ox_lo, ox_hi) = ox_range(kx);
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let xrow = &mut xslab[(iy - pad) * wd..(iy - pad + 1) * wd];
                        let gyrow = &gy.data()[(co * ho + oy) * wo..(co * ho + oy + 1) * wo];
                        for ox in ox_lo..ox_hi {
                            xrow[ox * stride + kx - pad] += wv * gyrow[ox];
                        }
                    }
                }
            }
        }
    };
    if work < 1 << 15 {
        for (ci, xslab) in gx.chunks_mut(h * wd).enumerate() {
            gx_kernel(ci, xslab);
        }
    } else {
        gx.par_chunks_mut(h * wd).enumerate().for_each(|(ci, xslab)| gx_kernel(ci, xslab));
    }

    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
        Tensor::new(vec![cout], gb).expect("shape"),
    )
}

fn layer_norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    gy: &Tensor<S>,
    eps: f64,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let n = *x.shape().last().expect("rank >= 1");
    let inv_n = S::one() / S::from_f64(n as f64);
    let epss = S::from_f64(eps);
    let mut gx = vec![S::zero(); x.numel()];
    let mut gg = vec![S::zero(); n];
    let mut gb = vec![S::zero(); n];
    for lane in 0..x.numel() / n {
        let xs = &x.data()[lane * n..(lane + 1) * n];
        let gys = &gy.data()[lane * n..(lane + 1) * n];
        let mu = pairwise_sum(xs) * inv_n;
        let centered: Vec<S> = xs.iter().map(|&v| v - mu).collect();
        let var = pairwise_sum(&centered.iter().map(|&c| c * c).collect::<Vec<_>>()) * inv_n;
        let inv_std = S::one() / (var + epss).sqrt();
        let xhat: Vec<S> = centered.iter().map(|&c| c * inv_std).collect();
        let dxhat: Vec<S> = gys.iter().zip(gamma.data()).map(|(&g, &gm)| g * gm).collect();
        let mean_dxhat = pairwise_sum(&dxhat) * inv_n;
        let mean_dxhat_xhat =
            pairwise_sum(&dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).collect::<Vec<_>>()) * inv_n;
        for i in 0..n {
            gx[lane * n + i] = inv_std * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
            gg[i] += gys[i] * xhat[i];
            gb[i] += gys[i];
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(vec![n], gg).expect("shape"),
        Tensor::new(vec![n], gb).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_input_is_uniform() {
        let mut g = Graph::<f64>::new(false);
        let x = g.leaf(t64(&[3], &[1.0, 1.0, 1.0]), false);
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut g = Graph::<f64>::new(false);
        let data = [0.3, -1.2, 2.0, 0.7, 0.0, -0.5];
        let x = g.leaf(t64(&[2, 3], &data), false);
        let y = g.softmax(x, 1).unwrap();
        for row in 0..2 {
            let s: f64 = g.value(y).data()[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted: Vec<f64> = data.iter().map(|v| v + 7.5).collect();
        let xs = g.leaf(t64(&[2, 3], &shifted), false);
        let ys = g.softmax(xs, 1).unwrap();
        for i in 0..6 {
            assert!((g.value(y).data()[i] - g.value(ys).data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new(false);
        let eye = g.leaf(t64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]), false);
        let a = g.leaf(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y).data(), g.value(a).data());
    }

    #[test]
    fn tanh_zero_gates_to_zero() {
        let mut g = Graph::<f64>::new(false);
        let z = g.leaf(Tensor::scalar(0.0), false);
        let y = g.tanh(z).unwrap();
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn quadratic_gradient() {
        // loss = sum(w ⊙ w), w = [1,2] → grad = [2,4]
        let mut g = Graph::<f64>::new(false);
        let w = g.leaf(t64(&[2], &[1.0, 2.0]), true);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq, None).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn nontrainable_leaf_gets_no_gradient() {
        let mut g = Graph::<f64>::new(false);
        let w = g.leaf(t64(&[2], &[1.0, 2.0]), true);
        let e = g.leaf(t64(&[2], &[3.0, 4.0]), false);
        let p = g.mul(w, e).unwrap();
        let loss = g.sum(p, None).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(e).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn gradient_accumulation_is_additive() {
        // y = x + x → dy/dx = 2 exactly
        let mut g = Graph::<f64>::new(false);
        let x = g.leaf(Tensor::scalar(1.5), true);
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y, None).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new(false);
        let x = g.leaf(t64(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn conv2d_one_by_one_identity_kernel() {
        let mut g = Graph::<f64>::new(false);
        let x = g.leaf(t64(&[2, 2, 2], &[0.3, -1.7, 2.5, 0.9, -0.2, 1.1, 4.4, -3.3]), false);
        let w = g.leaf(t64(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]), false);
        let b = g.leaf(t64(&[2], &[0.0, 0.0]), false);
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn reshape_round_trip_is_bit_exact() {
        let mut g = Graph::<f64>::new(false);
        let x = g.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let a = g.reshape(x, &[3, 2]).unwrap();
        let b = g.reshape(a, &[2, 3]).unwrap();
        assert_eq!(g.value(b).data(), g.value(x).data());
        assert_eq!(g.value(b).shape(), g.value(x).shape());
    }

    #[test]
    fn checked_mode_rejects_non_finite() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(t64(&[2], &[1.0, f64::NAN]), false);
        assert!(matches!(g.tanh(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut g = Graph::<f64>::new(false);
        let a = g.leaf(t64(&[2], &[1.0, 2.0]), false);
        let b = g.leaf(t64(&[3], &[1.0, 2.0, 3.0]), false);
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"));
    }

    #[test]
    fn broadcast_and_reduce_inverse() {
        let mut g = Graph::<f64>::new(false);
        let x = g.leaf(t64(&[1, 3], &[1.0, 2.0, 3.0]), true);
        let y = g.broadcast(x, &[4, 3]).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 3]);
        let loss = g.sum(y, None).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut g = Graph::<f64>::new(false);
        let a = g.leaf(t64(&[1, 2], &[1.0, 2.0]), false);
        let b = g.leaf(t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]), false);
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = g.slice(c, &[1, 0], &[2, 2]).unwrap();
        assert_eq!(g.value(s).data(), g.value(b).data());
    }

    #[test]
    fn linear_interp_midpoint() {
        // p = 1.25 between rows t1 and t2 → 0.75 t1 + 0.25 t2
        let mut g = Graph::<f64>::new(false);
        let v = g.leaf(t64(&[3, 2], &[0.0, 0.0, 1.0, 10.0, 2.0, 20.0]), false);
        let p = g.leaf(t64(&[1], &[1.25]), false);
        let y = g.linear_interp_1d(v, p).unwrap();
        assert!((g.value(y).data()[0] - 1.25).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 12.5).abs() < 1e-12);
    }

    #[test]
    fn single_row_interp_ignores_position() {
        let mut g = Graph::<f64>::new(false);
        let v = g.leaf(t64(&[1, 2], &[3.0, -4.0]), false);
        let p = g.leaf(t64(&[3], &[0.0, 0.4, 0.9]), false);
        let y = g.linear_interp_1d(v, p).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -4.0, 3.0, -4.0, 3.0, -4.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut g = Graph::<f64>::new(false);
        let table = g.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        assert!(matches!(g.embedding_lookup(table, &[2]), Err(Error::UnknownClass(2))));
    }

    #[test]
    fn attention_single_key_softmax_is_one() {
        let mut g = Graph::<f64>::new(false);
        let q = g.leaf(t64(&[1, 2], &[0.3, -0.7]), false);
        let k = g.leaf(t64(&[1, 2], &[1.0, 1.0]), false);
        let v = g.leaf(t64(&[1, 2], &[5.0, -2.0]), false);
        let y = g.scaled_dot_attention(q, k, v).unwrap();
        assert!((g.value(y).data()[0] - 5.0).abs() < 1e-12);
        assert!((g.value(y).data()[1] + 2.0).abs() < 1e-12);
    }
}
