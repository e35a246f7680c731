//! Conditioning branches: a copy of the UNet encoder trunk fed by the fused
//! visual tokens, emitting residuals through zero-initialized convolutions.
//!
//! The background branch consumes background-filtered ray features with box
//! tokens in its env; the foreground branch consumes foreground features
//! with map tokens. Provenance is checked at the call site, so crossing the
//! streams is a hard error, not a silent mix-up.

use super::unet::{timestep_embedding, BranchTaps, EncoderTrunk};
use super::ModelConfig;
use crate::encoders::{TokenKind, TokenSeq};
use crate::error::{Error, Result};
use crate::fusion::{Provenance, VisualTokens};
use crate::nn::{Conv2d, Ctx, Mlp, ZeroConv2d};
use crate::tensor::{ParamStore, Scalar};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Branch {
    pub provenance: Provenance,
    pub temb: Mlp,
    pub adapter: Conv2d,
    pub trunk: EncoderTrunk,
    tap_mid: ZeroConv2d,
    tap_skip1: ZeroConv2d,
    tap_skip0: ZeroConv2d,
    fourier_freqs: usize,
    timesteps: usize,
}

impl Branch {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        provenance: Provenance,
        cfg: &ModelConfig,
    ) -> Self {
        let c = cfg.base_channels;
        let temb_in = 2 * cfg.fourier_freqs + 1;
        Branch {
            provenance,
            temb: Mlp::init(store, rng, &format!("{name}.temb"), temb_in, cfg.temb_dim, cfg.temb_dim),
            adapter: Conv2d::init(store, rng, &format!("{name}.adapter"), cfg.visual_width, c, 3, 1, 1),
            trunk: EncoderTrunk::init(store, rng, &format!("{name}.trunk"), cfg),
            tap_mid: ZeroConv2d::init(store, &format!("{name}.tap_mid"), 4 * c, 4 * c, 1),
            tap_skip1: ZeroConv2d::init(store, &format!("{name}.tap_skip1"), 2 * c, 2 * c, 1),
            tap_skip0: ZeroConv2d::init(store, &format!("{name}.tap_skip0"), c, c, 1),
            fourier_freqs: cfg.fourier_freqs,
            timesteps: cfg.timesteps,
        }
    }

    /// The env of the background branch must never contain map tokens, the
    /// foreground branch never box tokens.
    fn check_env(&self, c_env: &TokenSeq) -> Result<()> {
        let forbidden = match self.provenance {
            Provenance::Background => TokenKind::Map,
            Provenance::Foreground => TokenKind::Box,
        };
        if c_env.contains_kind(forbidden) {
            return Err(Error::ProvenanceMismatch(format!(
                "{:?} branch env contains {forbidden:?} tokens",
                self.provenance
            )));
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(
        &self,
        cx: &mut Ctx<S>,
        v_star: &VisualTokens,
        t: usize,
        c_env: &TokenSeq,
        latent: (usize, usize),
    ) -> Result<BranchTaps> {
        if v_star.provenance != self.provenance {
            return Err(Error::ProvenanceMismatch(format!(
                "{:?} feature fed to the {:?} branch",
                v_star.provenance, self.provenance
            )));
        }
        self.check_env(c_env)?;
        let (uw, vh) = latent;
        if v_star.count != uw * vh {
            return Err(Error::ShapeMismatch {
                op: "branch_forward",
                detail: format!("{} visual tokens for a {uw}x{vh} latent", v_star.count),
            });
        }
        let temb = timestep_embedding(cx, t, self.timesteps, self.fourier_freqs, &self.temb)?;
        let chw = crate::nn::tokens_to_chw(&mut cx.g, v_star.node, v_star.width, vh, uw)?;
        let x = self.adapter.forward(cx, chw)?;
        let out = self.trunk.forward(cx, x, temb, c_env)?;
        Ok(BranchTaps {
            mid: self.tap_mid.forward(cx, out.mid)?,
            skip1: self.tap_skip1.forward(cx, out.skip1)?,
            skip0: self.tap_skip0.forward(cx, out.skip0)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, normal_tensor};
    use crate::tensor::{apply_grads, AdamConfig};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            temb_dim: 8,
            attn_dim: 8,
            cond_width: 8,
            visual_width: 8,
            fourier_freqs: 2,
            ..ModelConfig::default()
        }
    }

    fn setup() -> (ParamStore<f64>, Branch) {
        let mut store = ParamStore::<f64>::new();
        let cfg = tiny_cfg();
        let b = Branch::init(&mut store, &mut init_rng(1, "b"), "branch_bg", Provenance::Background, &cfg);
        (store, b)
    }

    fn visual<'s>(cx: &mut Ctx<'s, f64>, prov: Provenance, seed: u64) -> VisualTokens {
        let node = cx.g.leaf(normal_tensor(&mut init_rng(seed, "v"), &[64, 8], 1.0), false);
        VisualTokens { node, count: 64, width: 8, provenance: prov }
    }

    fn env<'s>(cx: &mut Ctx<'s, f64>, kind: TokenKind) -> TokenSeq {
        let node = cx.g.leaf(normal_tensor(&mut init_rng(9, "e"), &[3, 8], 1.0), false);
        TokenSeq { node, kinds: vec![TokenKind::Cam, TokenKind::Text, kind] }
    }

    #[test]
    fn residuals_are_exactly_zero_at_init() {
        let (store, branch) = setup();
        let mut cx = Ctx::new(&store, false);
        let v = visual(&mut cx, Provenance::Background, 2);
        let e = env(&mut cx, TokenKind::Box);
        let taps = branch.forward(&mut cx, &v, 100, &e, (8, 8)).unwrap();
        for tap in [taps.mid, taps.skip1, taps.skip0] {
            assert!(cx.value(tap).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn provenance_mismatch_rejected() {
        let (store, branch) = setup();
        let mut cx = Ctx::new(&store, false);
        let v = visual(&mut cx, Provenance::Foreground, 3);
        let e = env(&mut cx, TokenKind::Box);
        assert!(matches!(
            branch.forward(&mut cx, &v, 100, &e, (8, 8)),
            Err(Error::ProvenanceMismatch(_))
        ));
    }

    #[test]
    fn crossover_env_contract() {
        let (store, branch) = setup();
        let mut cx = Ctx::new(&store, false);
        let v = visual(&mut cx, Provenance::Background, 4);
        // Background branch env holding map tokens is a wiring bug.
        let bad = env(&mut cx, TokenKind::Map);
        assert!(matches!(
            branch.forward(&mut cx, &v, 100, &bad, (8, 8)),
            Err(Error::ProvenanceMismatch(_))
        ));
    }

    #[test]
    fn one_step_on_taps_makes_residuals_nonzero() {
        let (mut store, branch) = setup();
        let grads = {
            let mut cx = Ctx::new(&store, false);
            let v = visual(&mut cx, Provenance::Background, 5);
            let e = env(&mut cx, TokenKind::Box);
            let taps = branch.forward(&mut cx, &v, 100, &e, (8, 8)).unwrap();
            // Pull a gradient through the taps.
            let s0 = cx.g.mean(taps.mid, None).unwrap();
            let s1 = cx.g.mean(taps.skip1, None).unwrap();
            let s2 = cx.g.mean(taps.skip0, None).unwrap();
            let s = cx.g.add(s0, s1).unwrap();
            let loss = cx.g.add(s, s2).unwrap();
            cx.backward_collect(loss).unwrap()
        };
        assert!(grads.iter().any(|(n, g)| n.contains(".tap_") && g.data().iter().any(|&x| x != 0.0)));
        apply_grads(&mut store, &grads, &AdamConfig::with_lr(0.01), true).unwrap();
        let mut cx = Ctx::new(&store, false);
        let v = visual(&mut cx, Provenance::Background, 5);
        let e = env(&mut cx, TokenKind::Box);
        let taps = branch.forward(&mut cx, &v, 100, &e, (8, 8)).unwrap();
        let any_nonzero = [taps.mid, taps.skip1, taps.skip0]
            .iter()
            .any(|&tap| cx.value(tap).data().iter().any(|&x| x != 0.0));
        assert!(any_nonzero);
    }
}
