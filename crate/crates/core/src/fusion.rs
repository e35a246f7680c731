//! Three-stage fusion attention over ray-sampled visual tokens:
//! residual self-attention, tanh-gated grounding on spatial tokens, then
//! 1-D deformable cross-attention into the text tokens.
//!
//! The whole stack is identity at initialization: the gate scalar, the
//! deformable offset/weight heads and the deformable output projection all
//! start at exactly zero.

use crate::encoders::TokenSeq;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::tensor::{NodeId, ParamStore, Scalar, Tensor};
use rand::Rng;

/// Which filtered label volume a token sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Foreground,
    Background,
}

/// `[T, d_v]` visual token node, `T = U·V` of the source feature.
#[derive(Debug, Clone)]
pub struct VisualTokens {
    pub node: NodeId,
    pub count: usize,
    pub width: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy)]
pub struct SfaConfig {
    /// Visual token width.
    pub d_v: usize,
    /// Condition token width.
    pub d_cond: usize,
    /// Deformable sample count per query.
    pub k_def: usize,
}

impl Default for SfaConfig {
    fn default() -> Self {
        SfaConfig { d_v: 64, d_cond: 64, k_def: 4 }
    }
}

#[derive(Debug, Clone)]
pub struct SfaParams {
    pub cfg: SfaConfig,
    gamma: String,
    s1_q: Linear,
    s1_k: Linear,
    s1_v: Linear,
    s1_o: Linear,
    adapter: Linear,
    s2_q: Linear,
    s2_k: Linear,
    s2_v: Linear,
    s2_o: Linear,
    offset_head: Linear,
    weight_head: Linear,
    text_value: Linear,
    deform_out: Linear,
}

impl SfaParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        cfg: SfaConfig,
    ) -> Self {
        let d = cfg.d_v;
        store.register(&format!("{name}.gamma"), Tensor::zeros(&[1]), true);
        SfaParams {
            s1_q: Linear::init(store, rng, &format!("{name}.s1.q"), d, d, false),
            s1_k: Linear::init(store, rng, &format!("{name}.s1.k"), d, d, false),
            s1_v: Linear::init(store, rng, &format!("{name}.s1.v"), d, d, false),
            s1_o: Linear::init(store, rng, &format!("{name}.s1.o"), d, d, true),
            adapter: Linear::init(store, rng, &format!("{name}.adapter"), cfg.d_cond, d, true),
            s2_q: Linear::init(store, rng, &format!("{name}.s2.q"), d, d, false),
            s2_k: Linear::init(store, rng, &format!("{name}.s2.k"), d, d, false),
            s2_v: Linear::init(store, rng, &format!("{name}.s2.v"), d, d, false),
            s2_o: Linear::init(store, rng, &format!("{name}.s2.o"), d, d, true),
            // Zero-init: sampling starts at the sequence midpoint with
            // uniform weights, and the fused term starts silent.
            offset_head: Linear::zero_init(store, &format!("{name}.offset"), d, cfg.k_def, true),
            weight_head: Linear::zero_init(store, &format!("{name}.weight"), d, cfg.k_def, true),
            text_value: Linear::init(store, rng, &format!("{name}.text_value"), cfg.d_cond, d, false),
            deform_out: Linear::zero_init(store, &format!("{name}.deform_out"), d, d, true),
            gamma: format!("{name}.gamma"),
            cfg,
        }
    }

    /// v'1 = v + SelfAttn(v).
    pub fn self_attend<S: Scalar>(&self, cx: &mut Ctx<S>, v: &VisualTokens) -> Result<VisualTokens> {
        let q = self.s1_q.forward(cx, v.node)?;
        let k = self.s1_k.forward(cx, v.node)?;
        let val = self.s1_v.forward(cx, v.node)?;
        let att = cx.g.scaled_dot_attention(q, k, val)?;
        let o = self.s1_o.forward(cx, att)?;
        let node = cx.g.add(v.node, o)?;
        Ok(VisualTokens { node, ..*v })
    }

    /// v'2 = v'1 + tanh(γ)·SelfAttn([v'1, adapt(c_spatial)]), keeping only
    /// the visual-position outputs.
    pub fn gated_ground<S: Scalar>(
        &self,
        cx: &mut Ctx<S>,
        v1: &VisualTokens,
        c_spatial: &TokenSeq,
    ) -> Result<VisualTokens> {
        debug_assert!(!c_spatial.is_empty(), "spatial sequence is never empty (null token)");
        let adapted = self.adapter.forward(cx, c_spatial.node)?;
        let seq = cx.g.concat(&[v1.node, adapted], 0)?;
        let q = self.s2_q.forward(cx, seq)?;
        let k = self.s2_k.forward(cx, seq)?;
        let val = self.s2_v.forward(cx, seq)?;
        let att = cx.g.scaled_dot_attention(q, k, val)?;
        let o = self.s2_o.forward(cx, att)?;
        let kept = cx.g.slice(o, &[0, 0], &[v1.count, v1.width])?;
        let gamma = cx.p(&self.gamma);
        let gate = cx.g.tanh(gamma)?;
        let gate_b = cx.g.broadcast(gate, &[v1.count, v1.width])?;
        let scaled = cx.g.mul(gate_b, kept)?;
        let node = cx.g.add(v1.node, scaled)?;
        Ok(VisualTokens { node, ..*v1 })
    }

    /// v* = v'2 + W_o Σ_k w_k · value(p_k), with continuous positions
    /// p_k = sigmoid(offset(q))·(N_txt - 1) sampled from the text tokens by
    /// linear interpolation and weights w = softmax(weight(q)).
    pub fn deform_fuse<S: Scalar>(
        &self,
        cx: &mut Ctx<S>,
        v2: &VisualTokens,
        c_text: &TokenSeq,
    ) -> Result<VisualTokens> {
        if c_text.is_empty() {
            return Err(Error::ShapeMismatch { op: "deform_fuse", detail: "no text tokens".into() });
        }
        let n_txt = c_text.len();
        let values = self.text_value.forward(cx, c_text.node)?;
        let offset_logits = self.offset_head.forward(cx, v2.node)?;
        let pos01 = cx.g.sigmoid(offset_logits)?;
        let pos = cx.g.scale(pos01, (n_txt - 1) as f64)?;
        let weight_logits = self.weight_head.forward(cx, v2.node)?;
        let weights = cx.g.softmax(weight_logits, 1)?;
        let mut acc: Option<NodeId> = None;
        for k in 0..self.cfg.k_def {
            let p_col = cx.g.slice(pos, &[0, k], &[v2.count, 1])?;
            let p_flat = cx.g.reshape(p_col, &[v2.count])?;
            let sampled = cx.g.linear_interp_1d(values, p_flat)?;
            let w_col = cx.g.slice(weights, &[0, k], &[v2.count, 1])?;
            let w_b = cx.g.broadcast(w_col, &[v2.count, v2.width])?;
            let term = cx.g.mul(w_b, sampled)?;
            acc = Some(match acc {
                None => term,
                Some(a) => cx.g.add(a, term)?,
            });
        }
        let fused = self.deform_out.forward(cx, acc.expect("k_def >= 1"))?;
        let node = cx.g.add(v2.node, fused)?;
        Ok(VisualTokens { node, ..*v2 })
    }

    /// Full three-stage composition, applied per branch.
    pub fn forward<S: Scalar>(
        &self,
        cx: &mut Ctx<S>,
        v: &VisualTokens,
        c_spatial: &TokenSeq,
        c_text: &TokenSeq,
    ) -> Result<VisualTokens> {
        let v1 = self.self_attend(cx, v)?;
        let v2 = self.gated_ground(cx, &v1, c_spatial)?;
        self.deform_fuse(cx, &v2, c_text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::TokenKind;
    use crate::nn::{init_rng, normal_tensor};

    fn setup(d: usize, k_def: usize) -> (ParamStore<f64>, SfaParams) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(31, "sfa");
        let cfg = SfaConfig { d_v: d, d_cond: d, k_def };
        let sfa = SfaParams::init(&mut store, &mut rng, "sfa", cfg);
        (store, sfa)
    }

    fn tokens<'s>(cx: &mut Ctx<'s, f64>, t: usize, d: usize, seed: u64, prov: Provenance) -> VisualTokens {
        let node = cx.g.leaf(normal_tensor(&mut init_rng(seed, "vt"), &[t, d], 1.0), false);
        VisualTokens { node, count: t, width: d, provenance: prov }
    }

    fn text_seq<'s>(cx: &mut Ctx<'s, f64>, n: usize, d: usize, seed: u64) -> TokenSeq {
        let node = cx.g.leaf(normal_tensor(&mut init_rng(seed, "tx"), &[n, d], 1.0), false);
        TokenSeq { node, kinds: vec![TokenKind::Text; n] }
    }

    #[test]
    fn single_token_self_attention_closed_form() {
        let (store, sfa) = setup(4, 2);
        let mut cx = Ctx::new(&store, false);
        let v = tokens(&mut cx, 1, 4, 1, Provenance::Background);
        let out = sfa.self_attend(&mut cx, &v).unwrap();
        // One key: softmax is 1, so v'1 = v + W_o(W_v v) + b_o.
        let x = cx.value(v.node).data().to_vec();
        let wv = store.get("sfa.s1.v.w").value.clone();
        let wo = store.get("sfa.s1.o.w").value.clone();
        let bo = store.get("sfa.s1.o.b").value.clone();
        let mut vv = vec![0.0; 4];
        for o in 0..4 {
            for i in 0..4 {
                vv[o] += x[i] * wv.data()[i * 4 + o];
            }
        }
        for (o, want) in cx.value(out.node).data().iter().enumerate() {
            let mut y = bo.data()[o];
            for i in 0..4 {
                y += vv[i] * wo.data()[i * 4 + o];
            }
            y += x[o];
            assert!((want - y).abs() < 1e-12);
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let (store, sfa) = setup(6, 2);
        let mut cx = Ctx::new(&store, false);
        let v = tokens(&mut cx, 5, 6, 2, Provenance::Background);
        let out = sfa.self_attend(&mut cx, &v).unwrap();
        // Reverse the token order and re-run.
        let data = cx.value(v.node).data().to_vec();
        let mut rev = vec![0.0; data.len()];
        for t in 0..5 {
            rev[t * 6..(t + 1) * 6].copy_from_slice(&data[(4 - t) * 6..(5 - t) * 6]);
        }
        let vr = cx.g.leaf(Tensor::new(vec![5, 6], rev).unwrap(), false);
        let vrt = VisualTokens { node: vr, count: 5, width: 6, provenance: Provenance::Background };
        let out_r = sfa.self_attend(&mut cx, &vrt).unwrap();
        for t in 0..5 {
            let a = &cx.value(out.node).data()[t * 6..(t + 1) * 6];
            let b = &cx.value(out_r.node).data()[(4 - t) * 6..(5 - t) * 6];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gate_identity_at_zero_is_bit_exact() {
        let (store, sfa) = setup(8, 2);
        let mut cx = Ctx::new(&store, false);
        let v1 = tokens(&mut cx, 12, 8, 3, Provenance::Foreground);
        let sp = text_seq(&mut cx, 3, 8, 4);
        let out = sfa.gated_ground(&mut cx, &v1, &sp).unwrap();
        assert_eq!(cx.value(out.node).data(), cx.value(v1.node).data());
    }

    #[test]
    fn gate_bounded_for_finite_gamma() {
        // |tanh(γ)| ≤ 1 always; strictly < 1 until f64 rounding saturates.
        for g in [0.0f64, 0.5, -3.0, 80.0, -1e6] {
            assert!(g.tanh().abs() <= 1.0);
        }
        for g in [0.0f64, 1.0, -4.0, 10.0] {
            assert!(g.tanh().abs() < 1.0);
        }
    }

    #[test]
    fn open_gate_is_sensitive_to_spatial_tokens() {
        let (mut store, sfa) = setup(8, 2);
        store.get_mut("sfa.gamma").value = Tensor::scalar(1.0);
        let mut cx = Ctx::new(&store, false);
        let v1 = tokens(&mut cx, 6, 8, 5, Provenance::Foreground);
        let sp_a = text_seq(&mut cx, 3, 8, 6);
        let sp_b = text_seq(&mut cx, 3, 8, 7);
        let out_a = sfa.gated_ground(&mut cx, &v1, &sp_a).unwrap();
        let out_b = sfa.gated_ground(&mut cx, &v1, &sp_b).unwrap();
        assert_ne!(cx.value(out_a.node).data(), cx.value(out_b.node).data());
    }

    #[test]
    fn zero_init_heads_sample_midpoint_uniformly() {
        let (store, sfa) = setup(4, 3);
        let mut cx = Ctx::new(&store, false);
        let v2 = tokens(&mut cx, 2, 4, 8, Provenance::Background);
        let text = text_seq(&mut cx, 5, 4, 9);
        // Reproduce the internal position/weight computation.
        let logits = sfa.offset_head.forward(&mut cx, v2.node).unwrap();
        let pos01 = cx.g.sigmoid(logits).unwrap();
        let pos = cx.g.scale(pos01, 4.0).unwrap();
        for &p in cx.value(pos).data() {
            assert_eq!(p, 0.5 * 4.0);
        }
        let wl = sfa.weight_head.forward(&mut cx, v2.node).unwrap();
        let w = cx.g.softmax(wl, 1).unwrap();
        for &x in cx.value(w).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let _ = text;
    }

    #[test]
    fn single_text_token_ignores_offsets() {
        let (mut store, sfa) = setup(4, 2);
        // Open the deformable output so differences would show.
        store.get_mut("sfa.deform_out.w").value =
            normal_tensor(&mut init_rng(10, "w"), &[4, 4], 0.5);
        let out_a = {
            let mut cx = Ctx::new(&store, false);
            let v2 = tokens(&mut cx, 3, 4, 11, Provenance::Background);
            let text = text_seq(&mut cx, 1, 4, 12);
            let out = sfa.deform_fuse(&mut cx, &v2, &text).unwrap();
            cx.value(out.node).data().to_vec()
        };
        // Perturb the offset head; a single text token interpolates to
        // itself at every position.
        store.get_mut("sfa.offset.w").value = normal_tensor(&mut init_rng(13, "o"), &[4, 2], 2.0);
        let out_b = {
            let mut cx = Ctx::new(&store, false);
            let v2 = tokens(&mut cx, 3, 4, 11, Provenance::Background);
            let text = text_seq(&mut cx, 1, 4, 12);
            let out = sfa.deform_fuse(&mut cx, &v2, &text).unwrap();
            cx.value(out.node).data().to_vec()
        };
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn full_stack_is_identity_to_first_stage_at_init() {
        let (store, sfa) = setup(8, 4);
        let mut cx = Ctx::new(&store, false);
        let v = tokens(&mut cx, 9, 8, 14, Provenance::Foreground);
        let sp = text_seq(&mut cx, 2, 8, 15);
        let tx = text_seq(&mut cx, 3, 8, 16);
        let v1 = sfa.self_attend(&mut cx, &v).unwrap();
        let star = sfa.forward(&mut cx, &v, &sp, &tx).unwrap();
        assert_eq!(cx.value(star.node).data(), cx.value(v1.node).data());
    }

    #[test]
    fn deform_positions_stay_in_range_and_weights_sum_to_one() {
        let (mut store, sfa) = setup(6, 4);
        // Random nonzero heads.
        store.get_mut("sfa.offset.w").value = normal_tensor(&mut init_rng(17, "o"), &[6, 4], 3.0);
        store.get_mut("sfa.offset.b").value = normal_tensor(&mut init_rng(18, "ob"), &[4], 3.0);
        store.get_mut("sfa.weight.w").value = normal_tensor(&mut init_rng(19, "w"), &[6, 4], 3.0);
        let mut cx = Ctx::new(&store, false);
        let v2 = tokens(&mut cx, 10, 6, 20, Provenance::Background);
        let n_txt = 7usize;
        let logits = sfa.offset_head.forward(&mut cx, v2.node).unwrap();
        let pos01 = cx.g.sigmoid(logits).unwrap();
        let pos = cx.g.scale(pos01, (n_txt - 1) as f64).unwrap();
        for &p in cx.value(pos).data() {
            assert!((0.0..=(n_txt - 1) as f64).contains(&p));
        }
        let wl = sfa.weight_head.forward(&mut cx, v2.node).unwrap();
        let w = cx.g.softmax(wl, 1).unwrap();
        for row in cx.value(w).data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_gradient_matches_finite_differences() {
        let (mut store, sfa) = setup(4, 2);
        store.get_mut("sfa.gamma").value = Tensor::scalar(0.3);
        let eval = |store: &ParamStore<f64>, want_grad: bool| -> (f64, Option<f64>) {
            let mut cx = Ctx::new(store, false);
            let v = tokens(&mut cx, 4, 4, 21, Provenance::Foreground);
            let sp = text_seq(&mut cx, 2, 4, 22);
            let tx = text_seq(&mut cx, 3, 4, 23);
            let out = sfa.forward(&mut cx, &v, &sp, &tx).unwrap();
            let loss = cx.g.mean(out.node, None).unwrap();
            let lv = cx.value(loss).item();
            if want_grad {
                let grads = cx.backward_collect(loss).unwrap();
                let g = grads.iter().find(|(n, _)| n == "sfa.gamma").unwrap().1.item();
                (lv, Some(g))
            } else {
                (lv, None)
            }
        };
        let (_, g) = eval(&store, true);
        let h = 1e-6;
        store.get_mut("sfa.gamma").value = Tensor::scalar(0.3 + h);
        let (lp, _) = eval(&store, false);
        store.get_mut("sfa.gamma").value = Tensor::scalar(0.3 - h);
        let (lm, _) = eval(&store, false);
        let fd = (lp - lm) / (2.0 * h);
        let g = g.unwrap();
        assert!((g - fd).abs() / g.abs().max(fd.abs()).max(1e-8) < 1e-4, "{g} vs {fd}");
    }
}
