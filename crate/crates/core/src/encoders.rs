//! Numerical scene representation: Fourier positional features, category and
//! text embedding tables, and the perceptron heads producing camera, text,
//! box and map condition tokens.
//!
//! Coordinates are normalized to [-1, 1] by the grid bounding box before the
//! Fourier embedding. The text table is frozen (seeded once, checkpointed,
//! never updated); category tables and all heads are trainable.

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Ctx, Mlp};
use crate::scene::geom::Vec3;
use crate::scene::types::{
    BoundingBox3D, Camera, MapPolyline, OccupancyGrid, Scene, NUM_CLASSES, NUM_MAP_CLASSES,
};
use crate::tensor::{NodeId, ParamStore, Scalar, Tensor};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierConfig {
    pub num_freqs: usize,
    pub include_input: bool,
}

impl Default for FourierConfig {
    fn default() -> Self {
        FourierConfig { num_freqs: 8, include_input: true }
    }
}

impl FourierConfig {
    /// Output length per input scalar.
    pub fn dim_per_scalar(&self) -> usize {
        2 * self.num_freqs + usize::from(self.include_input)
    }
}

/// Per scalar component: optional raw input, then
/// sin(2⁰x), cos(2⁰x), ..., sin(2^{L-1}x), cos(2^{L-1}x), in component order.
pub fn fourier_embed(xs: &[f64], cfg: &FourierConfig) -> Result<Vec<f64>> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "fourier_embed" });
    }
    let mut out = Vec::with_capacity(xs.len() * cfg.dim_per_scalar());
    for &x in xs {
        if cfg.include_input {
            out.push(x);
        }
        let mut freq = 1.0f64;
        for _ in 0..cfg.num_freqs {
            out.push((freq * x).sin());
            out.push((freq * x).cos());
            freq *= 2.0;
        }
    }
    Ok(out)
}

/// Map an ego point into [-1, 1]³ using the grid bounding box.
pub fn normalize_point(grid: &OccupancyGrid, p: &Vec3) -> [f64; 3] {
    let e = grid.voxel_size;
    let ext = [grid.dims.0 as f64 * e, grid.dims.1 as f64 * e, grid.dims.2 as f64 * e];
    [
        2.0 * (p.x() - grid.origin.x()) / ext[0] - 1.0,
        2.0 * (p.y() - grid.origin.y()) / ext[1] - 1.0,
        2.0 * (p.z() - grid.origin.z()) / ext[2] - 1.0,
    ]
}

/// The 21 normalized camera scalars: K row-major (scaled by the longer image
/// side), R row-major, then t (grid-normalized), in that order.
pub fn camera_scalars(camera: &Camera, grid: &OccupancyGrid) -> [f64; 21] {
    let mut out = [0.0f64; 21];
    let img = camera.image_size.0.max(camera.image_size.1) as f64;
    for i in 0..9 {
        out[i] = camera.intrinsics.0[i] / img;
    }
    out[9..18].copy_from_slice(&camera.rotation.0);
    let t = normalize_point(grid, &camera.center_ego());
    out[18..21].copy_from_slice(&t);
    out
}

/// Provenance tag carried by every condition token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Cam,
    Text,
    Box,
    Map,
}

/// A token sequence node `[T, d]` with per-token provenance.
#[derive(Debug, Clone)]
pub struct TokenSeq {
    pub node: NodeId,
    pub kinds: Vec<TokenKind>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn contains_kind(&self, kind: TokenKind) -> bool {
        self.kinds.contains(&kind)
    }
}

/// All four encoded modalities of one (scene, camera) pair.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    pub c_cam: TokenSeq,
    pub c_text: TokenSeq,
    pub c_box: TokenSeq,
    pub c_map: TokenSeq,
    pub width: usize,
}

/// Concatenate (cam, text, spatial) along the token axis, in that order.
pub fn build_env<S: Scalar>(
    cx: &mut Ctx<S>,
    c_cam: &TokenSeq,
    c_text: &TokenSeq,
    c_spatial: &TokenSeq,
) -> Result<TokenSeq> {
    let node = cx.g.concat(&[c_cam.node, c_text.node, c_spatial.node], 0)?;
    let mut kinds = c_cam.kinds.clone();
    kinds.extend_from_slice(&c_text.kinds);
    kinds.extend_from_slice(&c_spatial.kinds);
    Ok(TokenSeq { node, kinds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityKind {
    Box,
    Map,
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub fourier: FourierConfig,
    /// Embedding-table width (the pretrained-extractor stand-in dimension).
    pub class_dim: usize,
    /// Shared condition token width d.
    pub width: usize,
    pub vocab_size: usize,
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            fourier: FourierConfig::default(),
            class_dim: 32,
            width: 64,
            vocab_size: 32,
            hidden: 64,
        }
    }
}

/// Parameter bundle for all four encoders.
#[derive(Debug, Clone)]
pub struct SceneEncoders {
    pub cfg: EncoderConfig,
    cat_table: String,
    text_table: String,
    null_box: String,
    null_map: String,
    null_text: String,
    null_cam: String,
    e_box: Mlp,
    e_map: Mlp,
    e_cam: Mlp,
    e_text: Mlp,
}

impl SceneEncoders {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        cfg: EncoderConfig,
    ) -> Self {
        let geo = 24 * cfg.fourier.dim_per_scalar();
        let cam_in = 21 * cfg.fourier.dim_per_scalar();
        let cat_table = format!("{name}.cat_table");
        store.register(
            &cat_table,
            normal_tensor(rng, &[NUM_CLASSES + NUM_MAP_CLASSES, cfg.class_dim], 1.0),
            true,
        );
        // The text table mirrors a frozen pretrained extractor: seeded once,
        // stored in checkpoints, never trained.
        let text_table = format!("{name}.text_table");
        store.register(&text_table, normal_tensor(rng, &[cfg.vocab_size, cfg.class_dim], 1.0), false);
        let null_box = format!("{name}.null_box");
        let null_map = format!("{name}.null_map");
        let null_text = format!("{name}.null_text");
        let null_cam = format!("{name}.null_cam");
        store.register(&null_box, normal_tensor(rng, &[1, cfg.width], 0.02), true);
        store.register(&null_map, normal_tensor(rng, &[1, cfg.width], 0.02), true);
        store.register(&null_text, normal_tensor(rng, &[1, cfg.width], 0.02), true);
        store.register(&null_cam, normal_tensor(rng, &[1, cfg.width], 0.02), true);
        SceneEncoders {
            e_box: Mlp::init(store, rng, &format!("{name}.e_box"), cfg.class_dim + geo, cfg.hidden, cfg.width),
            e_map: Mlp::init(store, rng, &format!("{name}.e_map"), cfg.class_dim + geo, cfg.hidden, cfg.width),
            e_cam: Mlp::init(store, rng, &format!("{name}.e_cam"), cam_in, cfg.hidden, cfg.width),
            e_text: Mlp::init(store, rng, &format!("{name}.e_text"), cfg.class_dim, cfg.hidden, cfg.width),
            cat_table,
            text_table,
            null_box,
            null_map,
            null_text,
            null_cam,
            cfg,
        }
    }

    fn null_token<S: Scalar>(&self, cx: &mut Ctx<S>, name: &str, kind: TokenKind) -> TokenSeq {
        let node = cx.p(name);
        TokenSeq { node, kinds: vec![kind] }
    }

    /// One token per entity: category embedding concatenated with the
    /// Fourier features of the 24 flattened (normalized) coordinates, then
    /// the kind-specific perceptron. An empty list yields the learned null
    /// token.
    pub fn encode_entities<S: Scalar>(
        &self,
        cx: &mut Ctx<S>,
        grid: &OccupancyGrid,
        kind: EntityKind,
        boxes: &[BoundingBox3D],
        polylines: &[MapPolyline],
    ) -> Result<TokenSeq> {
        let (ids, coords): (Vec<usize>, Vec<Vec<Vec3>>) = match kind {
            EntityKind::Box => (
                boxes.iter().map(|b| b.category as usize).collect(),
                boxes.iter().map(|b| b.corners.to_vec()).collect(),
            ),
            EntityKind::Map => (
                polylines
                    .iter()
                    .map(|m| NUM_CLASSES + m.category.id() as usize)
                    .collect(),
                polylines.iter().map(|m| m.points.to_vec()).collect(),
            ),
        };
        let token_kind = match kind {
            EntityKind::Box => TokenKind::Box,
            EntityKind::Map => TokenKind::Map,
        };
        if ids.is_empty() {
            let name = match kind {
                EntityKind::Box => &self.null_box,
                EntityKind::Map => &self.null_map,
            };
            return Ok(self.null_token(cx, name, token_kind));
        }
        let n = ids.len();
        let mut geo = Vec::with_capacity(n * 24 * self.cfg.fourier.dim_per_scalar());
        for pts in &coords {
            if pts.len() != 8 {
                return Err(Error::InvalidScene(format!("entity has {} points, want 8", pts.len())));
            }
            let mut flat = Vec::with_capacity(24);
            for p in pts {
                flat.extend_from_slice(&normalize_point(grid, p));
            }
            geo.extend(fourier_embed(&flat, &self.cfg.fourier)?);
        }
        let geo_dim = 24 * self.cfg.fourier.dim_per_scalar();
        let geo_node = cx.g.constant(Tensor::from_f64_slice(&[n, geo_dim], &geo)?);
        let table = cx.p(&self.cat_table);
        let cat = cx.g.embedding_lookup(table, &ids)?;
        let joined = cx.g.concat(&[cat, geo_node], 1)?;
        let head = match kind {
            EntityKind::Box => &self.e_box,
            EntityKind::Map => &self.e_map,
        };
        let node = head.forward(cx, joined)?;
        Ok(TokenSeq { node, kinds: vec![token_kind; n] })
    }

    /// Single camera token from the flattened (K, R, t) scalars.
    pub fn encode_camera<S: Scalar>(
        &self,
        cx: &mut Ctx<S>,
        grid: &OccupancyGrid,
        camera: &Camera,
    ) -> Result<TokenSeq> {
        let scalars = camera_scalars(camera, grid);
        let feats = fourier_embed(&scalars, &self.cfg.fourier)?;
        let node = cx.g.constant(Tensor::from_f64_slice(&[1, feats.len()], &feats)?);
        let node = self.e_cam.forward(cx, node)?;
        Ok(TokenSeq { node, kinds: vec![TokenKind::Cam] })
    }

    /// Frozen table lookup then the trainable text head, one token per
    /// prompt id; the empty prompt yields the learned null token.
    pub fn encode_text<S: Scalar>(&self, cx: &mut Ctx<S>, prompt: &[u32]) -> Result<TokenSeq> {
        if prompt.is_empty() {
            return Ok(self.null_token(cx, &self.null_text, TokenKind::Text));
        }
        if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::OutOfVocabulary(bad, self.cfg.vocab_size));
        }
        let ids: Vec<usize> = prompt.iter().map(|&t| t as usize).collect();
        let table = cx.p(&self.text_table);
        let rows = cx.g.embedding_lookup(table, &ids)?;
        let node = self.e_text.forward(cx, rows)?;
        Ok(TokenSeq { node, kinds: vec![TokenKind::Text; ids.len()] })
    }

    /// Encode all four modalities of one (scene, camera) pair.
    pub fn encode_scene<S: Scalar>(
        &self,
        cx: &mut Ctx<S>,
        scene: &Scene,
        cam_index: usize,
    ) -> Result<ConditionSet> {
        let c_cam = self.encode_camera(cx, &scene.grid, &scene.cameras[cam_index])?;
        let c_text = self.encode_text(cx, &scene.prompt)?;
        let c_box = self.encode_entities(cx, &scene.grid, EntityKind::Box, &scene.boxes, &[])?;
        let c_map = self.encode_entities(cx, &scene.grid, EntityKind::Map, &[], &scene.map)?;
        Ok(ConditionSet { c_cam, c_text, c_box, c_map, width: self.cfg.width })
    }

    /// The all-null condition set used for condition dropout and
    /// classifier-free guidance.
    pub fn encode_null<S: Scalar>(&self, cx: &mut Ctx<S>) -> ConditionSet {
        ConditionSet {
            c_cam: self.null_token(cx, &self.null_cam, TokenKind::Cam),
            c_text: self.null_token(cx, &self.null_text, TokenKind::Text),
            c_box: self.null_token(cx, &self.null_box, TokenKind::Box),
            c_map: self.null_token(cx, &self.null_map, TokenKind::Map),
            width: self.cfg.width,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_rng;
    use crate::scene::gen::{generate_scene, GeneratorSpec};
    use crate::tensor::{apply_grads, AdamConfig};

    fn setup() -> (ParamStore<f64>, SceneEncoders, Scene) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(11, "enc");
        let enc = SceneEncoders::init(&mut store, &mut rng, "enc", EncoderConfig::default());
        let scene = generate_scene(4, &GeneratorSpec::default()).unwrap();
        (store, enc, scene)
    }

    #[test]
    fn fourier_zero_input() {
        let cfg = FourierConfig { num_freqs: 3, include_input: false };
        let out = fourier_embed(&[0.0], &cfg).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn fourier_pi_analytic() {
        let cfg = FourierConfig { num_freqs: 1, include_input: false };
        let out = fourier_embed(&[std::f64::consts::PI], &cfg).unwrap();
        assert!(out[0].abs() < 1e-12);
        assert!((out[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn fourier_periodicity_base_frequency() {
        let cfg = FourierConfig { num_freqs: 1, include_input: false };
        for &x in &[0.3, -1.7, 2.4] {
            let a = fourier_embed(&[x], &cfg).unwrap();
            let b = fourier_embed(&[x + std::f64::consts::TAU], &cfg).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fourier_length_law_and_range() {
        let cfg = FourierConfig { num_freqs: 5, include_input: true };
        let xs = [0.12, -0.9, 3.4, 100.0];
        let out = fourier_embed(&xs, &cfg).unwrap();
        assert_eq!(out.len(), xs.len() * cfg.dim_per_scalar());
        for (i, &v) in out.iter().enumerate() {
            if i % cfg.dim_per_scalar() == 0 {
                continue; // prepended raw input
            }
            assert!((-1.0..=1.0).contains(&v));
        }
        assert!(fourier_embed(&[f64::NAN], &cfg).is_err());
    }

    #[test]
    fn camera_flattening_order_sensitivity() {
        // Perturbing K[0,0] must change exactly the scalar-0 Fourier block.
        let (_, _, scene) = setup();
        let cfg = FourierConfig::default();
        let cam = &scene.cameras[0];
        let base = fourier_embed(&camera_scalars(cam, &scene.grid), &cfg).unwrap();
        let mut cam2 = cam.clone();
        cam2.intrinsics.0[0] += 3.0;
        let pert = fourier_embed(&camera_scalars(&cam2, &scene.grid), &cfg).unwrap();
        let d = cfg.dim_per_scalar();
        for (i, (a, b)) in base.iter().zip(&pert).enumerate() {
            if i < d {
                continue;
            }
            assert_eq!(a, b, "component {i} outside block 0 changed");
        }
        assert!(base[..d].iter().zip(&pert[..d]).any(|(a, b)| a != b));
    }

    #[test]
    fn entity_tokens_deterministic_and_null() {
        let (store, enc, scene) = setup();
        let mut cx = Ctx::new(&store, false);
        let one = enc
            .encode_entities(&mut cx, &scene.grid, EntityKind::Box, &scene.boxes, &[])
            .unwrap();
        assert_eq!(one.len(), scene.boxes.len());
        // Duplicate an entity: the two tokens must be identical.
        let dup = vec![scene.boxes[0].clone(), scene.boxes[0].clone()];
        let two = enc.encode_entities(&mut cx, &scene.grid, EntityKind::Box, &dup, &[]).unwrap();
        let t = cx.value(two.node);
        let w = enc.cfg.width;
        assert_eq!(&t.data()[..w], &t.data()[w..2 * w]);
        // Empty list: the learned null parameter itself.
        let none = enc.encode_entities(&mut cx, &scene.grid, EntityKind::Box, &[], &[]).unwrap();
        assert_eq!(none.len(), 1);
        assert_eq!(cx.value(none.node).data(), store.get("enc.null_box").value.data());
    }

    #[test]
    fn entity_token_matches_manual_composition() {
        let (store, enc, scene) = setup();
        let mut cx = Ctx::new(&store, false);
        let tok = enc
            .encode_entities(&mut cx, &scene.grid, EntityKind::Box, &scene.boxes[..1], &[])
            .unwrap();
        let got = cx.value(tok.node).data().to_vec();

        // Recompute by hand: table row ++ fourier(norm coords) through the
        // two linear layers with silu between.
        let b = &scene.boxes[0];
        let mut flat = Vec::new();
        for p in &b.corners {
            flat.extend_from_slice(&normalize_point(&scene.grid, p));
        }
        let geo = fourier_embed(&flat, &enc.cfg.fourier).unwrap();
        let cat_row = {
            let t = &store.get("enc.cat_table").value;
            t.data()[b.category as usize * enc.cfg.class_dim
                ..(b.category as usize + 1) * enc.cfg.class_dim]
                .to_vec()
        };
        let mut x: Vec<f64> = cat_row.into_iter().chain(geo).collect();
        for layer in ["enc.e_box.l1", "enc.e_box.l2"] {
            let w = &store.get(&format!("{layer}.w")).value;
            let bias = &store.get(&format!("{layer}.b")).value;
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            let mut y = vec![0.0f64; dout];
            for (o, slot) in y.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..din {
                    acc += x[i] * w.data()[i * dout + o];
                }
                *slot = acc + bias.data()[o];
            }
            if layer.ends_with("l1") {
                for v in y.iter_mut() {
                    let s = 1.0 / (1.0 + (-*v).exp());
                    *v *= s;
                }
            }
            x = y;
        }
        for (a, b) in got.iter().zip(&x) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn camera_token_deterministic_and_translation_sensitive() {
        let (store, enc, scene) = setup();
        let mut cx = Ctx::new(&store, false);
        let a = enc.encode_camera(&mut cx, &scene.grid, &scene.cameras[0]).unwrap();
        let b = enc.encode_camera(&mut cx, &scene.grid, &scene.cameras[0]).unwrap();
        assert_eq!(cx.value(a.node).data(), cx.value(b.node).data());
        let mut cam2 = scene.cameras[0].clone();
        cam2.translation = cam2.translation.add(&Vec3::new(0.5, 0.0, 0.0));
        let c = enc.encode_camera(&mut cx, &scene.grid, &cam2).unwrap();
        assert_ne!(cx.value(a.node).data(), cx.value(c.node).data());
    }

    #[test]
    fn text_empty_and_repeat() {
        let (store, enc, _) = setup();
        let mut cx = Ctx::new(&store, false);
        let none = enc.encode_text(&mut cx, &[]).unwrap();
        assert_eq!(none.len(), 1);
        let rep = enc.encode_text(&mut cx, &[9, 9, 9]).unwrap();
        let t = cx.value(rep.node);
        let w = enc.cfg.width;
        assert_eq!(&t.data()[..w], &t.data()[w..2 * w]);
        assert_eq!(&t.data()[..w], &t.data()[2 * w..3 * w]);
        assert!(matches!(enc.encode_text(&mut cx, &[99]), Err(Error::OutOfVocabulary(99, _))));
    }

    #[test]
    fn frozen_text_table_gets_no_gradient() {
        let (mut store, enc, _) = setup();
        let before = store.get("enc.text_table").value.clone();
        let grads = {
            let mut cx = Ctx::new(&store, false);
            let toks = enc.encode_text(&mut cx, &[1, 2, 3]).unwrap();
            let loss = cx.g.mean(toks.node, None).unwrap();
            cx.backward_collect(loss).unwrap()
        };
        assert!(grads.iter().any(|(n, _)| n.starts_with("enc.e_text")));
        assert!(grads.iter().all(|(n, _)| n != "enc.text_table"));
        apply_grads(&mut store, &grads, &AdamConfig::with_lr(0.1), true).unwrap();
        assert_eq!(store.get("enc.text_table").value.data(), before.data());
    }

    #[test]
    fn env_concatenation_order_and_slicing() {
        let (store, enc, scene) = setup();
        let mut cx = Ctx::new(&store, false);
        let cs = enc.encode_scene(&mut cx, &scene, 0).unwrap();
        let env = build_env(&mut cx, &cs.c_cam, &cs.c_text, &cs.c_box).unwrap();
        assert_eq!(env.len(), 1 + cs.c_text.len() + cs.c_box.len());
        assert_eq!(env.kinds[0], TokenKind::Cam);
        // Slicing the first token recovers c_cam bit-exactly.
        let w = enc.cfg.width;
        let first = cx.g.slice(env.node, &[0, 0], &[1, w]).unwrap();
        assert_eq!(cx.value(first).data(), cx.value(cs.c_cam.node).data());
        // Background-branch env carries box tokens, never map tokens.
        assert!(env.contains_kind(TokenKind::Box));
        assert!(!env.contains_kind(TokenKind::Map));
    }

    #[test]
    fn env_width_mismatch_rejected() {
        let (store, enc, scene) = setup();
        let mut cx = Ctx::new(&store, false);
        let cs = enc.encode_scene(&mut cx, &scene, 0).unwrap();
        let skinny = cx.g.constant(Tensor::zeros(&[2, 8]));
        let bad = TokenSeq { node: skinny, kinds: vec![TokenKind::Box; 2] };
        assert!(build_env(&mut cx, &cs.c_cam, &cs.c_text, &bad).is_err());
    }
}
