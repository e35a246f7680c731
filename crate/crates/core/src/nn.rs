//! Layer building blocks over the autodiff graph.
//!
//! Layers are lightweight descriptors: construction registers named
//! parameters in a [`ParamStore`], forward binds them into the current graph
//! through a [`Ctx`]. The same store serves f32 training and f64 checking.

use crate::error::Result;
use crate::tensor::{Binder, Graph, NodeId, ParamStore, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

/// Forward-pass context: one graph plus the store it binds parameters from.
pub struct Ctx<'s, S> {
    pub g: Graph<S>,
    pub store: &'s ParamStore<S>,
    pub binder: Binder,
}

impl<'s, S: Scalar> Ctx<'s, S> {
    pub fn new(store: &'s ParamStore<S>, checked: bool) -> Self {
        Ctx { g: Graph::new(checked), store, binder: Binder::new() }
    }

    pub fn p(&mut self, name: &str) -> NodeId {
        self.binder.param(&mut self.g, self.store, name)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        self.g.value(id)
    }

    /// Backward from `loss`, returning (name, grad) for bound trainables.
    pub fn backward_collect(&self, loss: NodeId) -> Result<Vec<(String, Tensor<S>)>> {
        let grads = self.g.backward(loss)?;
        Ok(self.binder.collect_grads(&self.g, &grads))
    }
}

/// Deterministic per-component init stream.
pub fn init_rng(seed: u64, salt: &str) -> ChaCha12Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in salt.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha12Rng::seed_from_u64(seed ^ h)
}

pub fn normal_tensor<S: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<S> {
    let n = Normal::new(0.0f64, std).expect("valid std");
    let numel: usize = shape.iter().product();
    let data: Vec<S> = (0..numel).map(|_| S::from_f64(n.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

// ── Linear ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        store.register(&format!("{name}.w"), normal_tensor(rng, &[in_dim, out_dim], std), true);
        let b = if bias {
            store.register(&format!("{name}.b"), Tensor::zeros(&[out_dim]), true);
            Some(format!("{name}.b"))
        } else {
            None
        };
        Linear { w: format!("{name}.w"), b, in_dim, out_dim }
    }

    /// Zero-initialized variant (weights and bias exactly zero).
    pub fn zero_init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        store.register(&format!("{name}.w"), Tensor::zeros(&[in_dim, out_dim]), true);
        let b = if bias {
            store.register(&format!("{name}.b"), Tensor::zeros(&[out_dim]), true);
            Some(format!("{name}.b"))
        } else {
            None
        };
        Linear { w: format!("{name}.w"), b, in_dim, out_dim }
    }

    /// x `[M, in]` -> `[M, out]`.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: NodeId) -> Result<NodeId> {
        let w = cx.p(&self.w);
        let y = cx.g.matmul(x, w)?;
        match &self.b {
            None => Ok(y),
            Some(bname) => {
                let b = cx.p(bname);
                let shape = cx.g.value(y).shape().to_vec();
                let bb = cx.g.broadcast(b, &shape)?;
                cx.g.add(y, bb)
            }
        }
    }
}

/// Two-layer perceptron with silu between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        Mlp {
            l1: Linear::init(store, rng, &format!("{name}.l1"), in_dim, hidden, true),
            l2: Linear::init(store, rng, &format!("{name}.l2"), hidden, out_dim, true),
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: NodeId) -> Result<NodeId> {
        let h = self.l1.forward(cx, x)?;
        let h = cx.g.silu(h)?;
        self.l2.forward(cx, h)
    }
}

// ── Convolution ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: String,
    pub b: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (1.0 / (cin * k * k) as f64).sqrt();
        store.register(&format!("{name}.w"), normal_tensor(rng, &[cout, cin, k, k], std), true);
        store.register(&format!("{name}.b"), Tensor::zeros(&[cout]), true);
        Conv2d { w: format!("{name}.w"), b: format!("{name}.b"), stride, pad }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: NodeId) -> Result<NodeId> {
        let w = cx.p(&self.w);
        let b = cx.p(&self.b);
        cx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Convolution whose weights and bias are constructed exactly zero, used for
/// residual taps that must be silent at initialization. The distinct type
/// makes the zero-init contract checkable at construction sites.
#[derive(Debug, Clone)]
pub struct ZeroConv2d {
    inner: Conv2d,
}

impl ZeroConv2d {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        store.register(&format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]), true);
        store.register(&format!("{name}.b"), Tensor::zeros(&[cout]), true);
        ZeroConv2d {
            inner: Conv2d { w: format!("{name}.w"), b: format!("{name}.b"), stride: 1, pad: 0 },
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: NodeId) -> Result<NodeId> {
        self.inner.forward(cx, x)
    }
}

// ── Normalization ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        store.register(&format!("{name}.gamma"), Tensor::full(&[dim], S::one()), true);
        store.register(&format!("{name}.beta"), Tensor::zeros(&[dim]), true);
        LayerNorm { gamma: format!("{name}.gamma"), beta: format!("{name}.beta"), eps: 1e-5 }
    }

    /// Normalizes the last axis.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: NodeId) -> Result<NodeId> {
        let g = cx.p(&self.gamma);
        let b = cx.p(&self.beta);
        cx.g.layer_norm(x, g, b, self.eps)
    }

    /// Normalizes the channel axis of a `[C,H,W]` map.
    pub fn forward_chw<S: Scalar>(&self, cx: &mut Ctx<S>, x: NodeId) -> Result<NodeId> {
        let hwc = cx.g.transpose(x, &[1, 2, 0])?;
        let n = self.forward(cx, hwc)?;
        cx.g.transpose(n, &[2, 0, 1])
    }
}

// ── Attention ────────────────────────────────────────────────────────

/// Single-head cross-attention with residual connection and pre-norm on the
/// query sequence. `x` `[Tq, d_model]`, `cond` `[Tk, d_cond]`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl CrossAttention {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        d_model: usize,
        d_cond: usize,
        d_attn: usize,
    ) -> Self {
        CrossAttention {
            norm: LayerNorm::init(store, &format!("{name}.norm"), d_model),
            q: Linear::init(store, rng, &format!("{name}.q"), d_model, d_attn, false),
            k: Linear::init(store, rng, &format!("{name}.k"), d_cond, d_attn, false),
            v: Linear::init(store, rng, &format!("{name}.v"), d_cond, d_attn, false),
            out: Linear::init(store, rng, &format!("{name}.out"), d_attn, d_model, true),
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: NodeId, cond: NodeId) -> Result<NodeId> {
        let xn = self.norm.forward(cx, x)?;
        let q = self.q.forward(cx, xn)?;
        let k = self.k.forward(cx, cond)?;
        let v = self.v.forward(cx, cond)?;
        let att = cx.g.scaled_dot_attention(q, k, v)?;
        let o = self.out.forward(cx, att)?;
        cx.g.add(x, o)
    }
}

/// Flatten `[C,H,W]` into `[H·W, C]` token rows.
pub fn chw_to_tokens<S: Scalar>(g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let hwc = g.transpose(x, &[1, 2, 0])?;
    g.reshape(hwc, &[shape[1] * shape[2], shape[0]])
}

/// Inverse of [`chw_to_tokens`].
pub fn tokens_to_chw<S: Scalar>(g: &mut Graph<S>, x: NodeId, c: usize, h: usize, w: usize) -> Result<NodeId> {
    let hwc = g.reshape(x, &[h, w, c])?;
    g.transpose(hwc, &[2, 0, 1])
}
