//! Epsilon-prediction mini-UNet: two down stages, cross-attention bottleneck
//! over the condition tokens, two up stages with additive skips, and three
//! decoder taps where branch residuals merge in.

use super::ModelConfig;
use crate::encoders::{fourier_embed, FourierConfig, TokenSeq};
use crate::error::Result;
use crate::nn::{Conv2d, CrossAttention, Ctx, LayerNorm, Linear, Mlp};
use crate::tensor::{NodeId, ParamStore, Scalar, Tensor};
use rand::Rng;

/// Residuals consumed at the three decoder taps.
#[derive(Debug, Clone, Copy)]
pub struct BranchTaps {
    /// Added to the bottleneck output, `[4C, H/4, W/4]`.
    pub mid: NodeId,
    /// Added to the inner skip, `[2C, H/2, W/2]`.
    pub skip1: NodeId,
    /// Added to the outer skip, `[C, H, W]`.
    pub skip0: NodeId,
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: LayerNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    norm2: LayerNorm,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        temb_dim: usize,
    ) -> Self {
        ResBlock {
            norm1: LayerNorm::init(store, &format!("{name}.norm1"), channels),
            conv1: Conv2d::init(store, rng, &format!("{name}.conv1"), channels, channels, 3, 1, 1),
            temb_proj: Linear::init(store, rng, &format!("{name}.temb"), temb_dim, channels, true),
            norm2: LayerNorm::init(store, &format!("{name}.norm2"), channels),
            conv2: Conv2d::init(store, rng, &format!("{name}.conv2"), channels, channels, 3, 1, 1),
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: NodeId, temb: NodeId) -> Result<NodeId> {
        let shape = cx.g.value(x).shape().to_vec();
        let h = self.norm1.forward_chw(cx, x)?;
        let h = cx.g.silu(h)?;
        let h = self.conv1.forward(cx, h)?;
        let ta = cx.g.silu(temb)?;
        let tp = self.temb_proj.forward(cx, ta)?;
        let tp = cx.g.reshape(tp, &[shape[0], 1, 1])?;
        let tp = cx.g.broadcast(tp, &shape)?;
        let h = cx.g.add(h, tp)?;
        let h = self.norm2.forward_chw(cx, h)?;
        let h = cx.g.silu(h)?;
        let h = self.conv2.forward(cx, h)?;
        cx.g.add(x, h)
    }
}

/// Shared encoder trunk: stem/adapter is owned by the caller; this covers
/// enc1 → down1 → enc2 → down2 → mid1 → cross-attention → mid2.
#[derive(Debug, Clone)]
pub struct EncoderTrunk {
    pub enc1: ResBlock,
    pub down1: Conv2d,
    pub enc2: ResBlock,
    pub down2: Conv2d,
    pub mid1: ResBlock,
    pub xattn: CrossAttention,
    pub mid2: ResBlock,
}

pub struct TrunkOut {
    pub skip0: NodeId,
    pub skip1: NodeId,
    pub mid: NodeId,
}

impl EncoderTrunk {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
    ) -> Self {
        let c = cfg.base_channels;
        EncoderTrunk {
            enc1: ResBlock::init(store, rng, &format!("{name}.enc1"), c, cfg.temb_dim),
            down1: Conv2d::init(store, rng, &format!("{name}.down1"), c, 2 * c, 3, 2, 1),
            enc2: ResBlock::init(store, rng, &format!("{name}.enc2"), 2 * c, cfg.temb_dim),
            down2: Conv2d::init(store, rng, &format!("{name}.down2"), 2 * c, 4 * c, 3, 2, 1),
            mid1: ResBlock::init(store, rng, &format!("{name}.mid1"), 4 * c, cfg.temb_dim),
            xattn: CrossAttention::init(
                store,
                rng,
                &format!("{name}.xattn"),
                4 * c,
                cfg.cond_width,
                cfg.attn_dim,
            ),
            mid2: ResBlock::init(store, rng, &format!("{name}.mid2"), 4 * c, cfg.temb_dim),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        cx: &mut Ctx<S>,
        x: NodeId,
        temb: NodeId,
        c_env: &TokenSeq,
    ) -> Result<TrunkOut> {
        let skip0 = self.enc1.forward(cx, x, temb)?;
        let h = self.down1.forward(cx, skip0)?;
        let skip1 = self.enc2.forward(cx, h, temb)?;
        let h = self.down2.forward(cx, skip1)?;
        let h = self.mid1.forward(cx, h, temb)?;
        // Bottleneck cross-attention runs on flattened spatial tokens.
        let shape = cx.g.value(h).shape().to_vec();
        let tokens = crate::nn::chw_to_tokens(&mut cx.g, h)?;
        let tokens = self.xattn.forward(cx, tokens, c_env.node)?;
        let h = crate::nn::tokens_to_chw(&mut cx.g, tokens, shape[0], shape[1], shape[2])?;
        let mid = self.mid2.forward(cx, h, temb)?;
        Ok(TrunkOut { skip0, skip1, mid })
    }
}

/// Compute the timestep embedding inside the graph from host-side Fourier
/// features of t/T.
pub fn timestep_embedding<S: Scalar>(
    cx: &mut Ctx<S>,
    t: usize,
    t_max: usize,
    freqs: usize,
    mlp: &Mlp,
) -> Result<NodeId> {
    let cfg = FourierConfig { num_freqs: freqs, include_input: true };
    let feats = fourier_embed(&[t as f64 / t_max as f64], &cfg)?;
    let node = cx.g.constant(Tensor::from_f64_slice(&[1, feats.len()], &feats)?);
    mlp.forward(cx, node)
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub temb: Mlp,
    pub stem: Conv2d,
    pub trunk: EncoderTrunk,
    pub up1: Conv2d,
    pub dec1: ResBlock,
    pub up2: Conv2d,
    pub dec2: ResBlock,
    pub head_norm: LayerNorm,
    pub head: Conv2d,
    pub fourier_freqs: usize,
    pub timesteps: usize,
}

impl UNet {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
    ) -> Self {
        let c = cfg.base_channels;
        let temb_in = 2 * cfg.fourier_freqs + 1;
        UNet {
            temb: Mlp::init(store, rng, &format!("{name}.temb"), temb_in, cfg.temb_dim, cfg.temb_dim),
            stem: Conv2d::init(store, rng, &format!("{name}.stem"), 3, c, 3, 1, 1),
            trunk: EncoderTrunk::init(store, rng, &format!("{name}.trunk"), cfg),
            up1: Conv2d::init(store, rng, &format!("{name}.up1"), 4 * c, 2 * c, 3, 1, 1),
            dec1: ResBlock::init(store, rng, &format!("{name}.dec1"), 2 * c, cfg.temb_dim),
            up2: Conv2d::init(store, rng, &format!("{name}.up2"), 2 * c, c, 3, 1, 1),
            dec2: ResBlock::init(store, rng, &format!("{name}.dec2"), c, cfg.temb_dim),
            head_norm: LayerNorm::init(store, &format!("{name}.head_norm"), c),
            head: Conv2d::init(store, rng, &format!("{name}.head"), c, 3, 3, 1, 1),
            fourier_freqs: cfg.fourier_freqs,
            timesteps: cfg.timesteps,
        }
    }

    /// Epsilon prediction. Every entry of `residual_sets` contributes
    /// additively at its tap; shapes must match the tap tensors.
    pub fn forward<S: Scalar>(
        &self,
        cx: &mut Ctx<S>,
        z_t: NodeId,
        t: usize,
        c_env: &TokenSeq,
        residual_sets: &[BranchTaps],
    ) -> Result<NodeId> {
        let temb = timestep_embedding(cx, t, self.timesteps, self.fourier_freqs, &self.temb)?;
        let x = self.stem.forward(cx, z_t)?;
        let out = self.trunk.forward(cx, x, temb, c_env)?;
        let mut mid = out.mid;
        let mut skip1 = out.skip1;
        let mut skip0 = out.skip0;
        for taps in residual_sets {
            mid = cx.g.add(mid, taps.mid)?;
            skip1 = cx.g.add(skip1, taps.skip1)?;
            skip0 = cx.g.add(skip0, taps.skip0)?;
        }
        let h = cx.g.upsample_nearest(mid, 2)?;
        let h = self.up1.forward(cx, h)?;
        let h = cx.g.add(h, skip1)?;
        let h = self.dec1.forward(cx, h, temb)?;
        let h = cx.g.upsample_nearest(h, 2)?;
        let h = self.up2.forward(cx, h)?;
        let h = cx.g.add(h, skip0)?;
        let h = self.dec2.forward(cx, h, temb)?;
        let h = self.head_norm.forward_chw(cx, h)?;
        let h = cx.g.silu(h)?;
        self.head.forward(cx, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::TokenKind;
    use crate::nn::{init_rng, normal_tensor};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            temb_dim: 8,
            attn_dim: 8,
            cond_width: 8,
            fourier_freqs: 2,
            ..ModelConfig::default()
        }
    }

    fn env<'s>(cx: &mut Ctx<'s, f64>, n: usize, d: usize, seed: u64) -> TokenSeq {
        let node = cx.g.leaf(normal_tensor(&mut init_rng(seed, "env"), &[n, d], 1.0), false);
        TokenSeq { node, kinds: vec![TokenKind::Text; n] }
    }

    #[test]
    fn output_shape_matches_input_for_three_sizes() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let unet = UNet::init(&mut store, &mut init_rng(1, "u"), "unet", &cfg);
        for side in [16usize, 24, 32] {
            let mut cx = Ctx::new(&store, false);
            let z = cx
                .g
                .leaf(normal_tensor(&mut init_rng(2, "z"), &[3, side, side], 1.0), false);
            let e = env(&mut cx, 3, cfg.cond_width, 3);
            let y = unet.forward(&mut cx, z, 500, &e, &[]).unwrap();
            assert_eq!(cx.value(y).shape(), &[3, side, side]);
        }
    }

    #[test]
    fn zero_residuals_are_additive_identity() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let unet = UNet::init(&mut store, &mut init_rng(4, "u"), "unet", &cfg);
        let c = cfg.base_channels;
        let mut cx = Ctx::new(&store, false);
        let z = cx.g.leaf(normal_tensor(&mut init_rng(5, "z"), &[3, 16, 16], 1.0), false);
        let e = env(&mut cx, 2, cfg.cond_width, 6);
        let plain = unet.forward(&mut cx, z, 10, &e, &[]).unwrap();
        let taps = BranchTaps {
            mid: cx.g.leaf(Tensor::zeros(&[4 * c, 4, 4]), false),
            skip1: cx.g.leaf(Tensor::zeros(&[2 * c, 8, 8]), false),
            skip0: cx.g.leaf(Tensor::zeros(&[c, 16, 16]), false),
        };
        let with = unet.forward(&mut cx, z, 10, &e, &[taps]).unwrap();
        assert_eq!(cx.value(plain).data(), cx.value(with).data());
    }

    #[test]
    fn tap_shape_mismatch_rejected() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let unet = UNet::init(&mut store, &mut init_rng(7, "u"), "unet", &cfg);
        let c = cfg.base_channels;
        let mut cx = Ctx::new(&store, false);
        let z = cx.g.leaf(normal_tensor(&mut init_rng(8, "z"), &[3, 16, 16], 1.0), false);
        let e = env(&mut cx, 2, cfg.cond_width, 9);
        let taps = BranchTaps {
            mid: cx.g.leaf(Tensor::zeros(&[4 * c, 5, 5]), false),
            skip1: cx.g.leaf(Tensor::zeros(&[2 * c, 8, 8]), false),
            skip0: cx.g.leaf(Tensor::zeros(&[c, 16, 16]), false),
        };
        assert!(unet.forward(&mut cx, z, 10, &e, &[taps]).is_err());
    }

    #[test]
    fn conditioning_tokens_change_output() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let unet = UNet::init(&mut store, &mut init_rng(10, "u"), "unet", &cfg);
        let mut cx = Ctx::new(&store, false);
        let z = cx.g.leaf(normal_tensor(&mut init_rng(11, "z"), &[3, 16, 16], 1.0), false);
        let e1 = env(&mut cx, 2, cfg.cond_width, 12);
        let e2 = env(&mut cx, 2, cfg.cond_width, 13);
        let y1 = unet.forward(&mut cx, z, 250, &e1, &[]).unwrap();
        let y2 = unet.forward(&mut cx, z, 250, &e2, &[]).unwrap();
        assert_ne!(cx.value(y1).data(), cx.value(y2).data());
    }
}
