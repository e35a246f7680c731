//! Ancestral (DDPM) and deterministic (DDIM) reverse-diffusion samplers
//! with classifier-free guidance.

use super::model::{CondValues, DualDiffusionModel};
use crate::error::{Error, Result};
use crate::nn::init_rng;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SamplerKind {
    Ddpm,
    Ddim { steps: usize, eta: f64 },
}

impl Default for SamplerKind {
    fn default() -> Self {
        SamplerKind::Ddim { steps: 20, eta: 0.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub guidance: f64,
    pub seed: u64,
    /// Evaluate branch residuals (the dual model) or the base UNet only.
    pub use_branches: bool,
    pub checked: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { guidance: 2.0, seed: 0, use_branches: true, checked: false }
    }
}

fn draw_normal<S: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let data: Vec<S> = (0..numel)
        .map(|_| S::from_f64(StandardNormal.sample(rng)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Guided noise estimate: eps_u + s·(eps_c - eps_u). The endpoints are
/// evaluated exactly (s = 0 skips the conditional pass, s = 1 the
/// unconditional one).
pub fn guided_eps<S: Scalar>(
    model: &DualDiffusionModel<S>,
    z_t: &Tensor<S>,
    t: usize,
    cond: Option<&CondValues<S>>,
    opts: &SampleOptions,
) -> Result<Tensor<S>> {
    let s = opts.guidance;
    let cond = if s == 0.0 { None } else { cond };
    match cond {
        None => model.eps_value(z_t, t, None, false, opts.checked),
        Some(values) => {
            let eps_c = model.eps_value(z_t, t, Some(values), opts.use_branches, opts.checked)?;
            if s == 1.0 {
                return Ok(eps_c);
            }
            let eps_u = model.eps_value(z_t, t, None, false, opts.checked)?;
            let sv = S::from_f64(s);
            let data = eps_u
                .data()
                .iter()
                .zip(eps_c.data())
                .map(|(&u, &c)| u + sv * (c - u))
                .collect();
            Tensor::new(eps_u.shape().to_vec(), data)
        }
    }
}

fn clamp_unit<S: Scalar>(t: &mut Tensor<S>) {
    let one = S::one();
    for v in t.data_mut() {
        *v = (*v).max_s(-one).min_s(one);
    }
}

/// Run the reverse process from seeded Gaussian noise; the result is the
/// z_0 estimate clamped to [-1, 1].
pub fn sample<S: Scalar>(
    model: &DualDiffusionModel<S>,
    cond: Option<&CondValues<S>>,
    sampler: &SamplerKind,
    opts: &SampleOptions,
) -> Result<Tensor<S>> {
    let (uw, vh) = model.cfg.latent;
    let shape = [3usize, vh, uw];
    let mut rng = init_rng(opts.seed, "sampler");
    let mut z: Tensor<S> = draw_normal(&mut rng, &shape);
    let sched = &model.schedule;
    let t_max = sched.t_max();
    match *sampler {
        SamplerKind::Ddpm => {
            for t in (1..=t_max).rev() {
                let eps = guided_eps(model, &z, t, cond, opts)?;
                let ab = sched.alpha_bar(t);
                let a = sched.alpha(t);
                let coeff = S::from_f64(sched.beta(t) / (1.0 - ab).sqrt());
                let inv_sqrt_a = S::from_f64(1.0 / a.sqrt());
                let mut mean: Vec<S> = z
                    .data()
                    .iter()
                    .zip(eps.data())
                    .map(|(&zv, &ev)| inv_sqrt_a * (zv - coeff * ev))
                    .collect();
                if t > 1 {
                    let ab_prev = sched.alpha_bar(t - 1);
                    let var = (1.0 - ab_prev) / (1.0 - ab) * sched.beta(t);
                    let sigma = S::from_f64(var.sqrt());
                    let noise: Tensor<S> = draw_normal(&mut rng, &shape);
                    for (m, n) in mean.iter_mut().zip(noise.data()) {
                        *m += sigma * *n;
                    }
                }
                z = Tensor::new(shape.to_vec(), mean)?;
            }
        }
        SamplerKind::Ddim { steps, eta } => {
            if steps == 0 || steps > t_max {
                return Err(Error::InvalidConfig(format!(
                    "ddim steps {steps} outside 1..={t_max}"
                )));
            }
            let taus: Vec<usize> = (1..=steps).map(|i| i * t_max / steps).collect();
            for i in (0..steps).rev() {
                let t = taus[i];
                let t_prev = if i > 0 { taus[i - 1] } else { 0 };
                let eps = guided_eps(model, &z, t, cond, opts)?;
                let ab = sched.alpha_bar(t);
                let ab_prev = sched.alpha_bar(t_prev);
                let sigma = eta
                    * ((1.0 - ab_prev) / (1.0 - ab)).sqrt()
                    * (1.0 - ab / ab_prev).sqrt();
                let dir_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
                let inv_sqrt_ab = S::from_f64(1.0 / ab.sqrt());
                let sqrt_one_minus = S::from_f64((1.0 - ab).sqrt());
                let sqrt_ab_prev = S::from_f64(ab_prev.sqrt());
                let dirs = S::from_f64(dir_coeff);
                let mut next: Vec<S> = z
                    .data()
                    .iter()
                    .zip(eps.data())
                    .map(|(&zv, &ev)| {
                        let x0 = (zv - sqrt_one_minus * ev) * inv_sqrt_ab;
                        sqrt_ab_prev * x0 + dirs * ev
                    })
                    .collect();
                if sigma > 0.0 {
                    let sg = S::from_f64(sigma);
                    let noise: Tensor<S> = draw_normal(&mut rng, &shape);
                    for (m, n) in next.iter_mut().zip(noise.data()) {
                        *m += sg * *n;
                    }
                }
                z = Tensor::new(shape.to_vec(), next)?;
            }
        }
    }
    clamp_unit(&mut z);
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::ModelConfig;
    use crate::scene::gen::{generate_scene, GeneratorSpec};

    fn tiny_model() -> DualDiffusionModel<f64> {
        let cfg = ModelConfig {
            latent: (16, 16),
            base_channels: 4,
            temb_dim: 8,
            attn_dim: 8,
            cond_width: 16,
            visual_width: 8,
            ors_class_dim: 4,
            ors_samples: 8,
            k_def: 2,
            fourier_freqs: 2,
            class_dim: 8,
            enc_hidden: 16,
            timesteps: 40,
            ..ModelConfig::default()
        };
        DualDiffusionModel::new(cfg, 7).unwrap()
    }

    fn cond(model: &DualDiffusionModel<f64>) -> CondValues<f64> {
        let scene = generate_scene(
            9,
            &GeneratorSpec { image_size: (16, 16), ..GeneratorSpec::default() },
        )
        .unwrap();
        model.prepare_cond(&scene, 0, false).unwrap()
    }

    #[test]
    fn guidance_zero_ignores_conditions() {
        let model = tiny_model();
        let cv = cond(&model);
        let kind = SamplerKind::Ddim { steps: 4, eta: 0.0 };
        let opts0 = SampleOptions { guidance: 0.0, seed: 3, ..Default::default() };
        let with = sample(&model, Some(&cv), &kind, &opts0).unwrap();
        let without = sample(&model, None, &kind, &opts0).unwrap();
        assert_eq!(with.data(), without.data());
    }

    #[test]
    fn guidance_one_is_pure_conditional() {
        let model = tiny_model();
        let cv = cond(&model);
        let z = crate::nn::normal_tensor::<f64>(&mut init_rng(4, "z"), &[3, 16, 16], 1.0);
        let opts1 = SampleOptions { guidance: 1.0, seed: 0, ..Default::default() };
        let e1 = guided_eps(&model, &z, 5, Some(&cv), &opts1).unwrap();
        let ec = model.eps_value(&z, 5, Some(&cv), true, false).unwrap();
        assert_eq!(e1.data(), ec.data());
    }

    #[test]
    fn guidance_is_affine_in_scale() {
        let model = tiny_model();
        let cv = cond(&model);
        let z = crate::nn::normal_tensor::<f64>(&mut init_rng(5, "z"), &[3, 16, 16], 1.0);
        let eps_at = |s: f64| {
            let o = SampleOptions { guidance: s, seed: 0, ..Default::default() };
            guided_eps(&model, &z, 9, Some(&cv), &o).unwrap()
        };
        let e0 = eps_at(0.0);
        let eh = eps_at(0.5);
        let e1 = eps_at(1.0);
        for i in 0..e0.numel() {
            let lhs = 2.0 * eh.data()[i] - e0.data()[i];
            assert!((lhs - e1.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn ddim_eta_zero_is_deterministic() {
        let model = tiny_model();
        let cv = cond(&model);
        let kind = SamplerKind::Ddim { steps: 5, eta: 0.0 };
        let opts = SampleOptions { guidance: 2.0, seed: 12, ..Default::default() };
        let a = sample(&model, Some(&cv), &kind, &opts).unwrap();
        let b = sample(&model, Some(&cv), &kind, &opts).unwrap();
        assert_eq!(a.data(), b.data());
        // Output is clamped to [-1, 1].
        assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_init_dual_model_samples_like_base() {
        let model = tiny_model();
        let cv = cond(&model);
        let kind = SamplerKind::Ddim { steps: 4, eta: 0.0 };
        let dual = SampleOptions { guidance: 2.0, seed: 21, use_branches: true, checked: false };
        let base = SampleOptions { guidance: 2.0, seed: 21, use_branches: false, checked: false };
        let a = sample(&model, Some(&cv), &kind, &dual).unwrap();
        let b = sample(&model, Some(&cv), &kind, &base).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn ddpm_runs_and_stays_bounded() {
        let model = tiny_model();
        let opts = SampleOptions { guidance: 0.0, seed: 2, ..Default::default() };
        let z = sample(&model, None, &SamplerKind::Ddpm, &opts).unwrap();
        assert_eq!(z.shape(), &[3, 16, 16]);
        assert!(z.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
}
