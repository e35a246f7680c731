//! Independent oracles and the check registry behind the verify command.
//!
//! Oracles here deliberately re-derive results with naive loops so the fast
//! paths have something honest to be compared against; they must never call
//! into the code paths they check.

use crate::diffusion::{
    sample, DualDiffusionModel, ModelConfig, NoiseSchedule, SampleOptions, SamplerKind,
    ScheduleConfig,
};
use crate::encoders::{TokenKind, TokenSeq};
use crate::error::Result;
use crate::fgmask::{build_mask, masked_mse, ForegroundMask, ProjectedBox};
use crate::formats::Image;
use crate::fusion::{Provenance, SfaConfig, SfaParams, VisualTokens};
use crate::nn::{init_rng, normal_tensor, Ctx};
use crate::ors::{pixel_ray, query_grid, sample_ray, OrsFeature, OrsFilter, SamplingPlan};
use crate::scene::gen::{generate_scene, GeneratorSpec};
use crate::scene::raster::{horizon_color, shade, RasterPlan};
use crate::scene::types::Scene;
use crate::tensor::{Graph, ParamStore, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::time::Instant;

// ── Naive oracles ────────────────────────────────────────────────────

/// Per-pixel, per-sample label lookup with no batching, no pre-filtering
/// and no parallelism: the reference the renderer must match bit for bit.
pub fn ors_oracle(
    scene: &Scene,
    cam_index: usize,
    plan: &SamplingPlan,
    filter: OrsFilter,
) -> OrsFeature {
    let camera = &scene.cameras[cam_index];
    let (width, height) = camera.image_size;
    let mut labels = vec![0u8; width * height * plan.n];
    for v in 0..height {
        for u in 0..width {
            let ray = pixel_ray(camera, (u as f64, v as f64)).expect("valid camera");
            for (k, point) in sample_ray(&ray, plan).iter().enumerate() {
                let raw = query_grid(&scene.grid, point);
                labels[(v * width + u) * plan.n + k] = filter.apply(scene, raw);
            }
        }
    }
    OrsFeature { width, height, plan: *plan, camera_index: cam_index, filter, labels }
}

/// Brute-force first-hit search with quarter-voxel steps, one pixel at a
/// time, mirroring the documented rasterizer semantics.
pub fn raster_oracle(scene: &Scene, cam_index: usize) -> Image {
    let camera = &scene.cameras[cam_index];
    let (width, height) = camera.image_size;
    let plan = RasterPlan::for_scene(scene);
    let mut rgb = vec![0.0f64; width * height * 3];
    for v in 0..height {
        for u in 0..width {
            let ray = pixel_ray(camera, (u as f64, v as f64)).expect("valid camera");
            let mut depth = plan.near;
            let mut color = horizon_color(v, height);
            while depth <= plan.far {
                let p = ray.origin.add(&ray.direction.scale(depth));
                let label = query_grid(&scene.grid, &p);
                if label != 0 {
                    color = shade(label, depth, plan.far);
                    break;
                }
                depth += plan.step;
            }
            rgb[(v * width + u) * 3..(v * width + u) * 3 + 3].copy_from_slice(&color);
        }
    }
    Image { width, height, rgb }
}

// ── Finite differences ───────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    pub fn absorb(&mut self, other: &GradReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
        self.checked += other.checked;
    }

    fn record(&mut self, rel: f64, what: String) {
        self.checked += 1;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = what;
        }
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Central finite differences over every element of every input, against
/// the provided analytic gradients. `loss_fn` must be a pure function of
/// the inputs.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    loss_fn: impl Fn(&[Tensor<f64>]) -> Result<f64>,
    step: f64,
    label: &str,
) -> Result<GradReport> {
    let mut report = GradReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = loss_fn(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = loss_fn(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            report.record(rel_err(grad.data()[j], numeric), format!("{label}[{i}][{j}]"));
        }
    }
    Ok(report)
}

const FD_STEP: f64 = 1e-5;

/// Finite-difference battery over the whole op vocabulary. Linear ops are
/// held to 1e-7, nonlinear to 1e-4.
pub fn check_op_gradients() -> Result<(GradReport, GradReport)> {
    let mut rng = init_rng(2024, "fd-ops");
    let mut linear = GradReport::default();
    let mut nonlinear = GradReport::default();

    let rand = |rng: &mut rand_chacha::ChaCha12Rng, shape: &[usize]| -> Tensor<f64> {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    };

    macro_rules! check {
        ($bucket:expr, $label:expr, $inputs:expr, $build:expr) => {{
            let inputs: Vec<Tensor<f64>> = $inputs;
            let build = $build;
            let loss_of = |ins: &[Tensor<f64>]| -> Result<f64> {
                let mut g = Graph::<f64>::new(false);
                let ids: Vec<_> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
                let out = build(&mut g, &ids)?;
                let loss = g.mean(out, None)?;
                Ok(g.value(loss).item())
            };
            let analytic: Vec<Tensor<f64>> = {
                let mut g = Graph::<f64>::new(false);
                let ids: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
                let out = build(&mut g, &ids)?;
                let loss = g.mean(out, None)?;
                let grads = g.backward(loss)?;
                ids.iter()
                    .map(|&id| grads.get(id).cloned().unwrap_or_else(|| {
                        Tensor::zeros(g.value(id).shape())
                    }))
                    .collect()
            };
            let rep = gradcheck(&inputs, &analytic, loss_of, FD_STEP, $label)?;
            $bucket.absorb(&rep);
        }};
    }

    // Linear ops.
    check!(linear, "add", vec![rand(&mut rng, &[3, 4]), rand(&mut rng, &[3, 4])], |g: &mut Graph<f64>, ids: &[_]| g.add(ids[0], ids[1]));
    check!(linear, "sub", vec![rand(&mut rng, &[3, 4]), rand(&mut rng, &[3, 4])], |g: &mut Graph<f64>, ids: &[_]| g.sub(ids[0], ids[1]));
    check!(linear, "matmul", vec![rand(&mut rng, &[3, 4]), rand(&mut rng, &[4, 2])], |g: &mut Graph<f64>, ids: &[_]| g.matmul(ids[0], ids[1]));
    check!(linear, "reshape", vec![rand(&mut rng, &[2, 6])], |g: &mut Graph<f64>, ids: &[_]| g.reshape(ids[0], &[3, 4]));
    check!(linear, "transpose", vec![rand(&mut rng, &[2, 3, 4])], |g: &mut Graph<f64>, ids: &[_]| g.transpose(ids[0], &[2, 0, 1]));
    check!(linear, "concat", vec![rand(&mut rng, &[2, 3]), rand(&mut rng, &[4, 3])], |g: &mut Graph<f64>, ids: &[_]| g.concat(ids, 0));
    check!(linear, "slice", vec![rand(&mut rng, &[4, 5])], |g: &mut Graph<f64>, ids: &[_]| g.slice(ids[0], &[1, 2], &[2, 3]));
    check!(linear, "broadcast", vec![rand(&mut rng, &[1, 4])], |g: &mut Graph<f64>, ids: &[_]| g.broadcast(ids[0], &[3, 4]));
    check!(linear, "sum", vec![rand(&mut rng, &[3, 4])], |g: &mut Graph<f64>, ids: &[_]| g.sum(ids[0], None));
    check!(linear, "sum_axis", vec![rand(&mut rng, &[3, 4])], |g: &mut Graph<f64>, ids: &[_]| g.sum(ids[0], Some(1)));
    check!(linear, "mean_axis", vec![rand(&mut rng, &[3, 4])], |g: &mut Graph<f64>, ids: &[_]| g.mean(ids[0], Some(0)));
    check!(linear, "avg_pool2d", vec![rand(&mut rng, &[2, 4, 4])], |g: &mut Graph<f64>, ids: &[_]| g.avg_pool2d(ids[0], 2));
    check!(linear, "upsample", vec![rand(&mut rng, &[2, 3, 3])], |g: &mut Graph<f64>, ids: &[_]| g.upsample_nearest(ids[0], 2));
    check!(linear, "embedding", vec![rand(&mut rng, &[5, 3])], |g: &mut Graph<f64>, ids: &[_]| {
        g.embedding_lookup(ids[0], &[4, 0, 2, 2])
    });

    // Nonlinear ops.
    check!(nonlinear, "mul", vec![rand(&mut rng, &[3, 4]), rand(&mut rng, &[3, 4])], |g: &mut Graph<f64>, ids: &[_]| g.mul(ids[0], ids[1]));
    check!(nonlinear, "tanh", vec![rand(&mut rng, &[7])], |g: &mut Graph<f64>, ids: &[_]| g.tanh(ids[0]));
    check!(nonlinear, "sigmoid", vec![rand(&mut rng, &[7])], |g: &mut Graph<f64>, ids: &[_]| g.sigmoid(ids[0]));
    check!(nonlinear, "silu", vec![rand(&mut rng, &[7])], |g: &mut Graph<f64>, ids: &[_]| g.silu(ids[0]));
    check!(nonlinear, "softmax", vec![rand(&mut rng, &[3, 5])], |g: &mut Graph<f64>, ids: &[_]| g.softmax(ids[0], 1));
    check!(
        nonlinear,
        "layer_norm",
        vec![rand(&mut rng, &[3, 6]), rand(&mut rng, &[6]), rand(&mut rng, &[6])],
        |g: &mut Graph<f64>, ids: &[_]| g.layer_norm(ids[0], ids[1], ids[2], 1e-5)
    );
    check!(
        nonlinear,
        "conv2d",
        vec![rand(&mut rng, &[2, 5, 5]), rand(&mut rng, &[3, 2, 3, 3]), rand(&mut rng, &[3])],
        |g: &mut Graph<f64>, ids: &[_]| g.conv2d(ids[0], ids[1], ids[2], 1, 1)
    );
    check!(
        nonlinear,
        "conv2d_s2",
        vec![rand(&mut rng, &[2, 6, 6]), rand(&mut rng, &[4, 2, 3, 3]), rand(&mut rng, &[4])],
        |g: &mut Graph<f64>, ids: &[_]| g.conv2d(ids[0], ids[1], ids[2], 2, 1)
    );
    check!(
        nonlinear,
        "linear_interp_1d",
        vec![rand(&mut rng, &[5, 3]), {
            let data = vec![0.3, 1.9, 2.5, 3.2];
            Tensor::new(vec![4], data).unwrap()
        }],
        |g: &mut Graph<f64>, ids: &[_]| g.linear_interp_1d(ids[0], ids[1])
    );
    check!(
        nonlinear,
        "scaled_dot_attention",
        vec![rand(&mut rng, &[3, 4]), rand(&mut rng, &[5, 4]), rand(&mut rng, &[5, 4])],
        |g: &mut Graph<f64>, ids: &[_]| g.scaled_dot_attention(ids[0], ids[1], ids[2])
    );

    Ok((linear, nonlinear))
}

/// The tiniest legal model, used by structural identity checks and the
/// whole-model finite-difference suite.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        latent: (8, 8),
        base_channels: 2,
        temb_dim: 4,
        attn_dim: 4,
        cond_width: 8,
        visual_width: 4,
        ors_class_dim: 2,
        ors_samples: 4,
        k_def: 2,
        fourier_freqs: 2,
        class_dim: 4,
        enc_hidden: 4,
        vocab_size: 8,
        timesteps: 10,
        ..ModelConfig::default()
    }
}

pub fn tiny_scene(seed: u64, latent: (usize, usize)) -> Scene {
    let spec = GeneratorSpec {
        dims: (16, 16, 8),
        image_size: latent,
        vehicles: (1, 2),
        buildings: (1, 2),
        pedestrians: (0, 1),
        vocab_size: 8,
        ..GeneratorSpec::default()
    };
    generate_scene(seed, &spec).expect("feasible spec")
}

/// Finite-difference check over every trainable parameter of the full
/// conditioned model (UNet, branches, fusion stacks, encoders, embedder).
/// For parameter tensors larger than `dense_limit`, a deterministic spread
/// of `sample_elems` elements is perturbed; every parameter is covered.
pub fn check_model_gradients(dense_limit: usize, sample_elems: usize) -> Result<GradReport> {
    let mut model = DualDiffusionModel::<f64>::new(tiny_model_config(), 77)?;
    let scene = tiny_scene(3, model.cfg.latent);
    let (v_fg, v_bg) = model.render_features(&scene, 0)?;
    let mask = crate::fgmask::scene_mask(&scene.boxes, &scene.cameras[0], model.cfg.latent);
    let (uw, vh) = model.cfg.latent;
    let mut rng = init_rng(5, "fd-model");
    let z_t = normal_tensor::<f64>(&mut rng, &[3, vh, uw], 1.0);
    let eps = normal_tensor::<f64>(&mut rng, &[3, vh, uw], 1.0);
    let t = 4usize;

    let loss_of = |model: &DualDiffusionModel<f64>| -> Result<f64> {
        let mut cx = Ctx::new(&model.store, false);
        let zn = cx.g.constant(z_t.clone());
        let en = cx.g.constant(eps.clone());
        let conds = model.encoders.encode_scene(&mut cx, &scene, 0)?;
        let fused = model.fuse(&mut cx, &conds, &v_fg, &v_bg)?;
        let pred = model.conditioned_eps(&mut cx, zn, t, &conds, &fused)?;
        let loss = masked_mse(&mut cx, en, pred, &mask)?;
        Ok(cx.value(loss).item())
    };

    // Analytic gradients for every trainable parameter in one sweep.
    let analytic: Vec<(String, Tensor<f64>)> = {
        let mut cx = Ctx::new(&model.store, false);
        let zn = cx.g.constant(z_t.clone());
        let en = cx.g.constant(eps.clone());
        let conds = model.encoders.encode_scene(&mut cx, &scene, 0)?;
        let fused = model.fuse(&mut cx, &conds, &v_fg, &v_bg)?;
        let pred = model.conditioned_eps(&mut cx, zn, t, &conds, &fused)?;
        let loss = masked_mse(&mut cx, en, pred, &mask)?;
        cx.backward_collect(loss)?
    };

    let mut report = GradReport::default();
    for (name, grad) in &analytic {
        let numel = grad.numel();
        let indices: Vec<usize> = if numel <= dense_limit {
            (0..numel).collect()
        } else {
            (0..sample_elems).map(|k| k * numel / sample_elems).collect()
        };
        for &j in &indices {
            let orig = model.store.get(name).value.data()[j];
            model.store.get_mut(name).value.data_mut()[j] = orig + FD_STEP;
            let up = loss_of(&model)?;
            model.store.get_mut(name).value.data_mut()[j] = orig - FD_STEP;
            let down = loss_of(&model)?;
            model.store.get_mut(name).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(rel_err(grad.data()[j], numeric), format!("{name}[{j}]"));
        }
    }
    Ok(report)
}

// ── Structural identity checks ───────────────────────────────────────

/// Gate identity: with the gate scalar set to `gamma`, the grounding stage
/// must return its input bit-exactly over `trials` random token sets.
/// Passing a nonzero gamma is the negative control.
pub fn gate_identity_holds(gamma: f64, trials: usize) -> bool {
    let mut store = ParamStore::<f64>::new();
    let mut rng = init_rng(51, "gate");
    let cfg = SfaConfig { d_v: 8, d_cond: 8, k_def: 2 };
    let sfa = SfaParams::init(&mut store, &mut rng, "sfa", cfg);
    store.get_mut("sfa.gamma").value = Tensor::scalar(gamma);
    let mut data_rng = init_rng(52, "gate-data");
    for _ in 0..trials {
        let mut cx = Ctx::new(&store, false);
        let node = cx.g.leaf(normal_tensor(&mut data_rng, &[6, 8], 1.0), false);
        let v1 = VisualTokens { node, count: 6, width: 8, provenance: Provenance::Background };
        let sp_node = cx.g.leaf(normal_tensor(&mut data_rng, &[2, 8], 1.0), false);
        let sp = TokenSeq { node: sp_node, kinds: vec![TokenKind::Box; 2] };
        let out = sfa.gated_ground(&mut cx, &v1, &sp).expect("forward");
        if cx.value(out.node).data() != cx.value(v1.node).data() {
            return false;
        }
    }
    true
}

/// Monte-Carlo moment check of the forward diffusion at one timestep:
/// sample mean and variance of z_t must sit within `k` standard errors.
pub fn schedule_moments(schedule: &NoiseSchedule, t: usize, draws: usize, k: f64, seed: u64) -> (bool, f64, f64) {
    let z0 = 0.7f64;
    let ab = schedule.alpha_bar(t);
    let want_mean = ab.sqrt() * z0;
    let want_var = 1.0 - ab;
    let mut rng = init_rng(seed, "moments");
    let z0t = Tensor::<f64>::scalar(z0);
    let mut values = Vec::with_capacity(draws);
    for _ in 0..draws {
        let eps = Tensor::<f64>::scalar(StandardNormal.sample(&mut rng));
        values.push(schedule.q_sample(&z0t, t, &eps).expect("valid t").item());
    }
    let n = draws as f64;
    let mean: f64 = values.iter().sum::<f64>() / n;
    let var: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let se_mean = want_var.sqrt() / n.sqrt();
    let se_var = want_var * (2.0 / (n - 1.0)).sqrt();
    let mean_err = (mean - want_mean).abs();
    let var_err = (var - want_var).abs();
    (mean_err <= k * se_mean && var_err <= k * se_var, mean_err / se_mean, var_err / se_var)
}

// ── Check registry ───────────────────────────────────────────────────

pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub metric: String,
}

impl CheckResult {
    fn new(name: &str, pass: bool, metric: String) -> Self {
        CheckResult { name: name.to_string(), pass, metric }
    }
}

/// Run every registered check; one result per check, failures included.
pub fn run_all_checks(quick: bool) -> Vec<CheckResult> {
    let mut out = Vec::new();

    // Ray-sampler oracle equivalence over random (scene, camera, plan).
    {
        let start = Instant::now();
        let triples = if quick { 20 } else { 100 };
        let mut rng = init_rng(1001, "verify-ors");
        let mut all_equal = true;
        for i in 0..triples {
            let spec = GeneratorSpec {
                cameras: 1 + (i % 3),
                image_size: (16, 16),
                ..GeneratorSpec::default()
            };
            let scene = generate_scene(9000 + i as u64, &spec).expect("feasible");
            let cam = rng.gen_range(0..scene.cameras.len());
            let n = rng.gen_range(4..=40);
            let near = rng.gen_range(0.05..0.5);
            let far = near + rng.gen_range(1.0..20.0);
            let plan = SamplingPlan::new(n, near, far).expect("valid");
            let filter = match i % 3 {
                0 => OrsFilter::Full,
                1 => OrsFilter::Foreground,
                _ => OrsFilter::Background,
            };
            let fast = crate::ors::render_ors(&scene, cam, &plan, filter).expect("render");
            let slow = ors_oracle(&scene, cam, &plan, filter);
            if fast.labels != slow.labels {
                all_equal = false;
                break;
            }
        }
        out.push(CheckResult::new(
            "ors_oracle_equivalence",
            all_equal,
            format!("triples={triples} elapsed={:.2}s", start.elapsed().as_secs_f64()),
        ));
    }

    // Foreground/background decomposition identity.
    {
        let scenes = if quick { 10 } else { 50 };
        let mut ok = true;
        for i in 0..scenes {
            let scene = generate_scene(500 + i, &GeneratorSpec { image_size: (16, 16), ..Default::default() })
                .expect("feasible");
            let plan = SamplingPlan::for_grid(&scene.grid, 12);
            let full = crate::ors::render_ors(&scene, 0, &plan, OrsFilter::Full).expect("render");
            let fg = crate::ors::render_ors(&scene, 0, &plan, OrsFilter::Foreground).expect("render");
            let bg = crate::ors::render_ors(&scene, 0, &plan, OrsFilter::Background).expect("render");
            let merged = crate::ors::merge_features(&fg, &bg).expect("merge");
            if merged.labels != full.labels {
                ok = false;
                break;
            }
        }
        out.push(CheckResult::new("ors_decomposition", ok, format!("scenes={scenes}")));
    }

    // Reference rasterizer vs brute-force oracle.
    {
        let mut ok = true;
        let mut max_diff = 0.0f64;
        for i in 0..3u64 {
            let scene = generate_scene(700 + i, &GeneratorSpec { image_size: (16, 16), ..Default::default() })
                .expect("feasible");
            let fast = crate::scene::raster::rasterize_reference(&scene, 0).expect("raster");
            let slow = raster_oracle(&scene, 0);
            for (a, b) in fast.rgb.iter().zip(&slow.rgb) {
                max_diff = max_diff.max((a - b).abs());
            }
            if max_diff > 0.0 {
                ok = false;
            }
        }
        out.push(CheckResult::new("raster_oracle_match", ok, format!("max_diff={max_diff:.2e}")));
    }

    // Finite differences: op vocabulary.
    match check_op_gradients() {
        Ok((linear, nonlinear)) => {
            out.push(CheckResult::new(
                "fd_linear_ops",
                linear.max_rel_err < 1e-7,
                format!("max_rel={:.2e} at {} ({} checks)", linear.max_rel_err, linear.worst, linear.checked),
            ));
            out.push(CheckResult::new(
                "fd_nonlinear_ops",
                nonlinear.max_rel_err < 1e-4,
                format!("max_rel={:.2e} at {} ({} checks)", nonlinear.max_rel_err, nonlinear.worst, nonlinear.checked),
            ));
        }
        Err(e) => {
            out.push(CheckResult::new("fd_linear_ops", false, format!("error: {e}")));
            out.push(CheckResult::new("fd_nonlinear_ops", false, format!("error: {e}")));
        }
    }

    // Finite differences: every model parameter.
    {
        let (dense, sampled) = if quick { (16, 2) } else { (64, 8) };
        match check_model_gradients(dense, sampled) {
            Ok(rep) => out.push(CheckResult::new(
                "fd_model_params",
                rep.max_rel_err < 1e-4,
                format!("max_rel={:.2e} at {} ({} checks)", rep.max_rel_err, rep.worst, rep.checked),
            )),
            Err(e) => out.push(CheckResult::new("fd_model_params", false, format!("error: {e}"))),
        }
    }

    // Mask laws.
    {
        let empty = build_mask(&[], (16, 16));
        let full_box = ProjectedBox { source_index: 0, u_min: 0.0, v_min: 0.0, u_max: 16.0, v_max: 16.0, area: 256.0 };
        let full = build_mask(&[full_box], (16, 16));
        let quad = ProjectedBox { source_index: 0, u_min: 6.0, v_min: 6.0, u_max: 10.0, v_max: 10.0, area: 16.0 };
        let quad_mask = build_mask(&[quad], (16, 16));
        let law1 = empty.weights.iter().all(|&w| w == 1.0);
        let law2 = full.weights.iter().all(|&w| w == 1.0);
        let law3 = quad_mask.at(7, 7) == 1.9375 && quad_mask.at(0, 0) == 1.0;
        // Uniform mask reduces masked loss to the plain mean square error.
        let store = ParamStore::<f64>::new();
        let mut cx = Ctx::new(&store, false);
        let mut rng = init_rng(61, "maskmse");
        let a = cx.g.leaf(normal_tensor(&mut rng, &[3, 4, 4], 1.0), false);
        let b = cx.g.leaf(normal_tensor(&mut rng, &[3, 4, 4], 1.0), false);
        let ml = masked_mse(&mut cx, a, b, &ForegroundMask::uniform(4, 4)).expect("loss");
        let d = cx.g.sub(b, a).expect("sub");
        let sq = cx.g.mul(d, d).expect("mul");
        let plain = cx.g.mean(sq, None).expect("mean");
        let law4 = (cx.value(ml).item() - cx.value(plain).item()).abs() < 1e-12;
        out.push(CheckResult::new(
            "mask_laws",
            law1 && law2 && law3 && law4,
            format!("empty={law1} fullframe={law2} quad={law3} mse_reduction={law4}"),
        ));
    }

    // Schedule: algebraic identities and Monte-Carlo moments.
    {
        let schedule = NoiseSchedule::linear(&ScheduleConfig::default()).expect("schedule");
        let mut alg = true;
        for t in 1..=schedule.t_max() {
            let ab = schedule.alpha_bar(t);
            if (ab.sqrt().powi(2) + (1.0 - ab) - 1.0).abs() > 1e-12 || ab >= schedule.alpha_bar(t - 1) {
                alg = false;
                break;
            }
        }
        alg &= schedule.alpha_bar(schedule.t_max()) < 0.01;
        out.push(CheckResult::new("schedule_identities", alg, "sqrt(ab)^2+(1-ab)=1, ab decreasing, ab_T<0.01".into()));

        let draws = if quick { 20_000 } else { 100_000 };
        let mut pass = true;
        let mut metrics = Vec::new();
        for t in [1usize, 500, 1000] {
            let (ok, zm, zv) = schedule_moments(&schedule, t, draws, 3.0, 90 + t as u64);
            pass &= ok;
            metrics.push(format!("t{t}:mean={zm:.2}se,var={zv:.2}se"));
        }
        out.push(CheckResult::new("schedule_moments", pass, metrics.join(" ")));
    }

    // Gate identity (bit-exact at zero).
    {
        let trials = if quick { 100 } else { 1000 };
        let ok = gate_identity_holds(0.0, trials);
        out.push(CheckResult::new("sfa_gate_identity", ok, format!("trials={trials} gamma=0")));
    }

    // Guidance algebra and zero-init sampling equivalence on a tiny model.
    {
        let model = DualDiffusionModel::<f64>::new(tiny_model_config(), 123).expect("model");
        let scene = tiny_scene(8, model.cfg.latent);
        let cond = model.prepare_cond(&scene, 0, false).expect("cond");
        let z = normal_tensor::<f64>(&mut init_rng(71, "z"), &[3, 8, 8], 1.0);
        let eps_at = |s: f64| {
            let opts = SampleOptions { guidance: s, seed: 0, ..Default::default() };
            crate::diffusion::guided_eps(&model, &z, 5, Some(&cond), &opts).expect("eps")
        };
        let e0 = eps_at(0.0);
        let eh = eps_at(0.5);
        let e1 = eps_at(1.0);
        let mut max_aff = 0.0f64;
        for i in 0..e0.numel() {
            max_aff = max_aff.max((2.0 * eh.data()[i] - e0.data()[i] - e1.data()[i]).abs());
        }
        out.push(CheckResult::new("guidance_affine", max_aff < 1e-6, format!("max_dev={max_aff:.2e}")));

        let kind = SamplerKind::Ddim { steps: 4, eta: 0.0 };
        let dual = sample(&model, Some(&cond), &kind, &SampleOptions { guidance: 2.0, seed: 5, use_branches: true, checked: false }).expect("sample");
        let base = sample(&model, Some(&cond), &kind, &SampleOptions { guidance: 2.0, seed: 5, use_branches: false, checked: false }).expect("sample");
        out.push(CheckResult::new(
            "zero_init_sampling_equivalence",
            dual.data() == base.data(),
            "dual(zero-init) == base, ddim4 eta=0".into(),
        ));
    }

    out
}
