//! Assembly of the dual-branch conditional model: base UNet, the two
//! conditioning branches with their fusion stacks, the scene encoders, and
//! the shared ray-feature embedder.

use super::branch::Branch;
use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::unet::UNet;
use crate::encoders::{build_env, ConditionSet, EncoderConfig, FourierConfig, SceneEncoders, TokenSeq};
use crate::error::Result;
use crate::fusion::{Provenance, SfaConfig, SfaParams, VisualTokens};
use crate::nn::{init_rng, Ctx};
use crate::ors::{render_ors, OrsEmbed, OrsFeature, OrsFilter, SamplingPlan};
use crate::scene::types::{Scene, NUM_CLASSES};
use crate::tensor::{NodeId, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Latent extents (U, V); the identity autoencoder makes these the
    /// image extents too.
    pub latent: (usize, usize),
    pub base_channels: usize,
    pub temb_dim: usize,
    pub attn_dim: usize,
    /// Condition token width d.
    pub cond_width: usize,
    /// Visual token width d_v.
    pub visual_width: usize,
    /// Per-class embedding width inside the ray-feature embedder.
    pub ors_class_dim: usize,
    /// Depth samples N per pixel ray.
    pub ors_samples: usize,
    /// Deformable sample count.
    pub k_def: usize,
    pub fourier_freqs: usize,
    /// Width of the category/text tables.
    pub class_dim: usize,
    pub enc_hidden: usize,
    pub vocab_size: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent: (32, 32),
            base_channels: 32,
            temb_dim: 64,
            attn_dim: 64,
            cond_width: 64,
            visual_width: 64,
            ors_class_dim: 8,
            ors_samples: 32,
            k_def: 4,
            fourier_freqs: 8,
            class_dim: 32,
            enc_hidden: 64,
            vocab_size: 32,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }
}

pub struct DualDiffusionModel<S> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub schedule: NoiseSchedule,
    pub unet: UNet,
    pub encoders: SceneEncoders,
    pub ors_embed: OrsEmbed,
    pub sfa_fg: SfaParams,
    pub sfa_bg: SfaParams,
    pub branch_fg: Branch,
    pub branch_bg: Branch,
}

/// Both branches' fused visual features for one forward.
pub struct FusedFeatures {
    pub v_star_fg: VisualTokens,
    pub v_star_bg: VisualTokens,
}

impl<S: Scalar> DualDiffusionModel<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let schedule = NoiseSchedule::linear(&cfg.schedule_config())?;
        let unet = UNet::init(&mut store, &mut init_rng(seed, "unet"), "unet", &cfg);
        let enc_cfg = EncoderConfig {
            fourier: FourierConfig { num_freqs: cfg.fourier_freqs, include_input: true },
            class_dim: cfg.class_dim,
            width: cfg.cond_width,
            vocab_size: cfg.vocab_size,
            hidden: cfg.enc_hidden,
        };
        let encoders = SceneEncoders::init(&mut store, &mut init_rng(seed, "enc"), "enc", enc_cfg);
        let ors_embed = OrsEmbed::init(
            &mut store,
            &mut init_rng(seed, "ors_embed"),
            "ors_embed",
            NUM_CLASSES,
            cfg.ors_class_dim,
            cfg.ors_samples,
            cfg.visual_width,
        );
        let sfa_cfg = SfaConfig { d_v: cfg.visual_width, d_cond: cfg.cond_width, k_def: cfg.k_def };
        let sfa_fg = SfaParams::init(&mut store, &mut init_rng(seed, "sfa_fg"), "sfa_fg", sfa_cfg);
        let sfa_bg = SfaParams::init(&mut store, &mut init_rng(seed, "sfa_bg"), "sfa_bg", sfa_cfg);
        let branch_fg = Branch::init(
            &mut store,
            &mut init_rng(seed, "branch_fg"),
            "branch_fg",
            Provenance::Foreground,
            &cfg,
        );
        let branch_bg = Branch::init(
            &mut store,
            &mut init_rng(seed, "branch_bg"),
            "branch_bg",
            Provenance::Background,
            &cfg,
        );
        Ok(DualDiffusionModel {
            cfg,
            store,
            schedule,
            unet,
            encoders,
            ors_embed,
            sfa_fg,
            sfa_bg,
            branch_fg,
            branch_bg,
        })
    }

    /// Render both filtered ray features of a (scene, camera) pair with the
    /// model's sampling plan.
    pub fn render_features(&self, scene: &Scene, cam_index: usize) -> Result<(OrsFeature, OrsFeature)> {
        let plan = SamplingPlan::for_grid(&scene.grid, self.cfg.ors_samples);
        let fg = render_ors(scene, cam_index, &plan, OrsFilter::Foreground)?;
        let bg = render_ors(scene, cam_index, &plan, OrsFilter::Background)?;
        Ok((fg, bg))
    }

    /// Embed and fuse both features through their branch-specific fusion
    /// stacks: the foreground stack grounds on map tokens, the background
    /// stack on box tokens.
    pub fn fuse<'s>(
        &self,
        cx: &mut Ctx<'s, S>,
        conds: &ConditionSet,
        v_fg: &OrsFeature,
        v_bg: &OrsFeature,
    ) -> Result<FusedFeatures> {
        let fg_node = self.ors_embed.forward(cx, v_fg)?;
        let bg_node = self.ors_embed.forward(cx, v_bg)?;
        let count = v_fg.width * v_fg.height;
        let fg_tokens = VisualTokens {
            node: fg_node,
            count,
            width: self.cfg.visual_width,
            provenance: Provenance::Foreground,
        };
        let bg_tokens = VisualTokens {
            node: bg_node,
            count,
            width: self.cfg.visual_width,
            provenance: Provenance::Background,
        };
        let v_star_fg = self.sfa_fg.forward(cx, &fg_tokens, &conds.c_map, &conds.c_text)?;
        let v_star_bg = self.sfa_bg.forward(cx, &bg_tokens, &conds.c_box, &conds.c_text)?;
        Ok(FusedFeatures { v_star_fg, v_star_bg })
    }

    /// Base-UNet env: all numerical modalities (cam, text, box then map).
    pub fn base_env<'s>(&self, cx: &mut Ctx<'s, S>, conds: &ConditionSet) -> Result<TokenSeq> {
        let spatial = cx.g.concat(&[conds.c_box.node, conds.c_map.node], 0)?;
        let mut kinds = conds.c_box.kinds.clone();
        kinds.extend_from_slice(&conds.c_map.kinds);
        build_env(cx, &conds.c_cam, &conds.c_text, &TokenSeq { node: spatial, kinds })
    }

    /// Fully conditioned epsilon prediction with both branch residuals.
    pub fn conditioned_eps<'s>(
        &self,
        cx: &mut Ctx<'s, S>,
        z_t: NodeId,
        t: usize,
        conds: &ConditionSet,
        fused: &FusedFeatures,
    ) -> Result<NodeId> {
        let env_bg = build_env(cx, &conds.c_cam, &conds.c_text, &conds.c_box)?;
        let env_fg = build_env(cx, &conds.c_cam, &conds.c_text, &conds.c_map)?;
        let taps_bg =
            self.branch_bg
                .forward(cx, &fused.v_star_bg, t, &env_bg, self.cfg.latent)?;
        let taps_fg =
            self.branch_fg
                .forward(cx, &fused.v_star_fg, t, &env_fg, self.cfg.latent)?;
        let env_base = self.base_env(cx, conds)?;
        self.unet.forward(cx, z_t, t, &env_base, &[taps_bg, taps_fg])
    }

    /// Null-condition, branch-free epsilon prediction (the unconditional
    /// path for training dropout and guidance).
    pub fn uncond_eps<'s>(&self, cx: &mut Ctx<'s, S>, z_t: NodeId, t: usize) -> Result<NodeId> {
        let null = self.encoders.encode_null(cx);
        let env = self.base_env(cx, &null)?;
        self.unet.forward(cx, z_t, t, &env, &[])
    }

    /// Conditioned prediction without branches (the base-only model).
    pub fn base_conditioned_eps<'s>(
        &self,
        cx: &mut Ctx<'s, S>,
        z_t: NodeId,
        t: usize,
        conds: &ConditionSet,
    ) -> Result<NodeId> {
        let env_base = self.base_env(cx, conds)?;
        self.unet.forward(cx, z_t, t, &env_base, &[])
    }
}

/// Condition tensors precomputed once per sampling run: token values and
/// fused visual features are timestep-independent, so the per-step graphs
/// only rerun the branches and the UNet.
pub struct CondValues<S> {
    pub cam: Tensor<S>,
    pub text: Tensor<S>,
    pub boxes: Tensor<S>,
    pub map: Tensor<S>,
    pub kinds_cam: Vec<crate::encoders::TokenKind>,
    pub kinds_text: Vec<crate::encoders::TokenKind>,
    pub kinds_box: Vec<crate::encoders::TokenKind>,
    pub kinds_map: Vec<crate::encoders::TokenKind>,
    pub v_star_fg: Tensor<S>,
    pub v_star_bg: Tensor<S>,
}

impl<S: Scalar> DualDiffusionModel<S> {
    pub fn prepare_cond(&self, scene: &Scene, cam_index: usize, checked: bool) -> Result<CondValues<S>> {
        let (v_fg, v_bg) = self.render_features(scene, cam_index)?;
        let mut cx = Ctx::new(&self.store, checked);
        let conds = self.encoders.encode_scene(&mut cx, scene, cam_index)?;
        let fused = self.fuse(&mut cx, &conds, &v_fg, &v_bg)?;
        Ok(CondValues {
            cam: cx.value(conds.c_cam.node).clone(),
            text: cx.value(conds.c_text.node).clone(),
            boxes: cx.value(conds.c_box.node).clone(),
            map: cx.value(conds.c_map.node).clone(),
            kinds_cam: conds.c_cam.kinds,
            kinds_text: conds.c_text.kinds,
            kinds_box: conds.c_box.kinds,
            kinds_map: conds.c_map.kinds,
            v_star_fg: cx.value(fused.v_star_fg.node).clone(),
            v_star_bg: cx.value(fused.v_star_bg.node).clone(),
        })
    }

    /// Rebind precomputed condition values into a fresh graph.
    pub fn bind_cond<'s>(
        &self,
        cx: &mut Ctx<'s, S>,
        values: &CondValues<S>,
    ) -> (ConditionSet, FusedFeatures) {
        let conds = ConditionSet {
            c_cam: TokenSeq { node: cx.g.constant(values.cam.clone()), kinds: values.kinds_cam.clone() },
            c_text: TokenSeq { node: cx.g.constant(values.text.clone()), kinds: values.kinds_text.clone() },
            c_box: TokenSeq { node: cx.g.constant(values.boxes.clone()), kinds: values.kinds_box.clone() },
            c_map: TokenSeq { node: cx.g.constant(values.map.clone()), kinds: values.kinds_map.clone() },
            width: self.cfg.cond_width,
        };
        let count = values.v_star_fg.shape()[0];
        let fused = FusedFeatures {
            v_star_fg: VisualTokens {
                node: cx.g.constant(values.v_star_fg.clone()),
                count,
                width: self.cfg.visual_width,
                provenance: Provenance::Foreground,
            },
            v_star_bg: VisualTokens {
                node: cx.g.constant(values.v_star_bg.clone()),
                count,
                width: self.cfg.visual_width,
                provenance: Provenance::Background,
            },
        };
        (conds, fused)
    }

    /// One epsilon evaluation on a fresh graph (inference path).
    pub fn eps_value(
        &self,
        z_t: &Tensor<S>,
        t: usize,
        cond: Option<&CondValues<S>>,
        with_branches: bool,
        checked: bool,
    ) -> Result<Tensor<S>> {
        let mut cx = Ctx::new(&self.store, checked);
        let z = cx.g.constant(z_t.clone());
        let out = match cond {
            None => self.uncond_eps(&mut cx, z, t)?,
            Some(values) => {
                let (conds, fused) = self.bind_cond(&mut cx, values);
                if with_branches {
                    self.conditioned_eps(&mut cx, z, t, &conds, &fused)?
                } else {
                    self.base_conditioned_eps(&mut cx, z, t, &conds)?
                }
            }
        };
        Ok(cx.value(out).clone())
    }
}
