//! Two-phase training loop.
//!
//! Phase 1 pretrains the base UNet on the null-condition path; phase 2
//! freezes it and trains the branches, fusion stacks and encoders; the
//! optional joint phase unfreezes everything. One step is one graph: all
//! batch items share the same parameter leaves, so gradient accumulation is
//! additive by construction and deterministic in item order.

use super::model::DualDiffusionModel;
use super::sampler::SamplerKind;
use crate::error::{Error, Result};
use crate::fgmask::{masked_mse, scene_mask, ForegroundMask};
use crate::formats::Image;
use crate::nn::{init_rng, Ctx};
use crate::ors::OrsFeature;
use crate::scene::raster::rasterize_reference;
use crate::scene::types::Scene;
use crate::tensor::{apply_grads, AdamConfig, Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BasePretrain,
    BranchTrain,
    Joint,
}

impl Phase {
    pub fn tag(&self) -> &'static str {
        match self {
            Phase::BasePretrain => "base_pretrain",
            Phase::BranchTrain => "branch_train",
            Phase::Joint => "joint",
        }
    }

    pub fn uses_conditions(&self) -> bool {
        !matches!(self, Phase::BasePretrain)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Probability of replacing all conditions with null tokens.
    pub p_drop: f64,
    pub guidance: f64,
    pub sampler: SamplerKind,
    pub checkpoint_every: u64,
    /// Copy the trained base trunk into fresh branches when branch
    /// training starts.
    pub warm_start: bool,
    pub checked: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::BasePretrain,
            lr: 8e-5,
            batch_size: 2,
            steps: 1000,
            p_drop: 0.1,
            guidance: 2.0,
            sampler: SamplerKind::default(),
            checkpoint_every: 1000,
            warm_start: true,
            checked: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::InvalidConfig(format!("p_drop {} outside [0,1)", self.p_drop)));
        }
        if self.guidance < 0.0 {
            return Err(Error::InvalidConfig(format!("guidance {} must be >= 0", self.guidance)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Immutable per-(scene, camera) inputs, rendered once.
struct CachedItem<S> {
    z0: Tensor<S>,
    mask: ForegroundMask,
    v_fg: OrsFeature,
    v_bg: OrsFeature,
    reference: Image,
}

pub struct Trainer<'m, S: Scalar> {
    pub model: &'m mut DualDiffusionModel<S>,
    pub scenes: Vec<Scene>,
    pub cfg: TrainConfig,
    pub seed: u64,
    cache: HashMap<(usize, usize), Arc<CachedItem<S>>>,
}

/// Deterministic per-step randomness: reseeded from (seed, phase, step) so
/// training is restart-exact after a resume.
pub fn step_rng(seed: u64, phase: Phase, step: u64) -> ChaCha12Rng {
    init_rng(seed ^ step.wrapping_mul(0x9e3779b97f4a7c15), phase.tag())
}

impl<'m, S: Scalar> Trainer<'m, S> {
    pub fn new(
        model: &'m mut DualDiffusionModel<S>,
        scenes: Vec<Scene>,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if scenes.is_empty() {
            return Err(Error::InvalidConfig("training needs at least one scene".into()));
        }
        for s in &scenes {
            for cam in &s.cameras {
                if cam.image_size != model.cfg.latent {
                    return Err(Error::InvalidConfig(format!(
                        "camera image size {:?} does not match latent {:?}",
                        cam.image_size, model.cfg.latent
                    )));
                }
            }
        }
        Ok(Trainer { model, scenes, cfg, seed, cache: HashMap::new() })
    }

    /// Set trainability flags for the configured phase. The text table is
    /// frozen in every phase.
    pub fn apply_phase(&mut self) {
        let store = &mut self.model.store;
        match self.cfg.phase {
            Phase::BasePretrain => {
                store.set_trainable_prefix("", false);
                store.set_trainable_prefix("unet.", true);
                // Null tokens feed the unconditional cross-attention.
                store.set_trainable_prefix("enc.null_", true);
            }
            Phase::BranchTrain => {
                store.set_trainable_prefix("", true);
                store.set_trainable_prefix("unet.", false);
            }
            Phase::Joint => {
                store.set_trainable_prefix("", true);
            }
        }
        store.get_mut("enc.text_table").trainable = false;
    }

    /// Copy the trained base trunk and timestep head into both branches.
    pub fn warm_start_branches(&mut self) {
        let names: Vec<String> = self
            .model
            .store
            .names()
            .filter(|n| n.starts_with("unet.trunk.") || n.starts_with("unet.temb."))
            .map(|s| s.to_string())
            .collect();
        for name in names {
            let value = self.model.store.get(&name).value.clone();
            let suffix = &name["unet.".len()..];
            for branch in ["branch_fg.", "branch_bg."] {
                let target = format!("{branch}{suffix}");
                if self.model.store.contains(&target) {
                    self.model.store.get_mut(&target).value = value.clone();
                }
            }
        }
    }

    fn cached(&mut self, scene_i: usize, cam_i: usize) -> Result<Arc<CachedItem<S>>> {
        if let Some(item) = self.cache.get(&(scene_i, cam_i)) {
            return Ok(item.clone());
        }
        let scene = &self.scenes[scene_i];
        let reference = rasterize_reference(scene, cam_i)?;
        let z0 = reference.to_latent::<S>();
        let mask = scene_mask(&scene.boxes, &scene.cameras[cam_i], self.model.cfg.latent);
        let (v_fg, v_bg) = self.model.render_features(scene, cam_i)?;
        let item = Arc::new(CachedItem { z0, mask, v_fg, v_bg, reference });
        self.cache.insert((scene_i, cam_i), item.clone());
        Ok(item)
    }

    pub fn reference_image(&mut self, scene_i: usize, cam_i: usize) -> Result<Image> {
        Ok(self.cached(scene_i, cam_i)?.reference.clone())
    }

    /// One optimization step. Returns the scalar loss. A non-finite loss
    /// aborts the step with parameters untouched.
    pub fn step(&mut self, step: u64) -> Result<f64> {
        let mut rng = step_rng(self.seed, self.cfg.phase, step);
        let t_max = self.model.schedule.t_max();
        let use_cond = self.cfg.phase.uses_conditions();

        struct ItemDraw<S> {
            cache: Arc<CachedItem<S>>,
            scene_i: usize,
            cam_i: usize,
            t: usize,
            z_t: Tensor<S>,
            eps: Tensor<S>,
            conditioned: bool,
        }
        let mut items: Vec<ItemDraw<S>> = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let scene_i = rng.gen_range(0..self.scenes.len());
            let cam_i = rng.gen_range(0..self.scenes[scene_i].cameras.len());
            let t = rng.gen_range(1..=t_max);
            let (uw, vh) = self.model.cfg.latent;
            let eps_data: Vec<S> = (0..3 * vh * uw)
                .map(|_| S::from_f64(StandardNormal.sample(&mut rng)))
                .collect();
            let eps = Tensor::new(vec![3, vh, uw], eps_data)?;
            let dropped = rng.gen_bool(self.cfg.p_drop);
            let cache = self.cached(scene_i, cam_i)?;
            let z_t = self.model.schedule.q_sample(&cache.z0, t, &eps)?;
            items.push(ItemDraw {
                cache,
                scene_i,
                cam_i,
                t,
                z_t,
                eps,
                conditioned: use_cond && !dropped,
            });
        }

        let model = &*self.model;
        let mut cx = Ctx::new(&model.store, self.cfg.checked);
        let mut losses = Vec::with_capacity(items.len());
        for item in &items {
            let z_node = cx.g.constant(item.z_t.clone());
            let eps_node = cx.g.constant(item.eps.clone());
            let pred = if item.conditioned {
                let scene = &self.scenes[item.scene_i];
                let conds = model.encoders.encode_scene(&mut cx, scene, item.cam_i)?;
                let fused = model.fuse(&mut cx, &conds, &item.cache.v_fg, &item.cache.v_bg)?;
                model.conditioned_eps(&mut cx, z_node, item.t, &conds, &fused)?
            } else {
                model.uncond_eps(&mut cx, z_node, item.t)?
            };
            losses.push(masked_mse(&mut cx, eps_node, pred, &item.cache.mask)?);
        }
        let stacked = cx.g.concat(&losses, 0)?;
        let loss = cx.g.mean(stacked, None)?;
        let loss_value = cx.value(loss).item().to_f64();
        if !loss_value.is_finite() {
            return Err(Error::StepRejected(format!("non-finite loss at step {step}")));
        }
        let grads = cx.backward_collect(loss)?;
        drop(cx);
        apply_grads(
            &mut self.model.store,
            &grads,
            &AdamConfig::with_lr(self.cfg.lr),
            self.cfg.checked,
        )?;
        Ok(loss_value)
    }
}
