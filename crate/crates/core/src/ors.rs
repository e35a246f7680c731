//! Occupancy ray sampling: per-pixel camera rays with equidistant depth
//! samples, each recording the voxel class at its position.
//!
//! Sampling is not first-hit rendering: out-of-grid samples read as empty
//! and the ray never terminates early. The fast path must stay bit-identical
//! to the naive floor-lookup loop in [`crate::verify`]; no traversal trick
//! that changes results is allowed.

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::scene::geom::{intrinsics_unproject, Vec3};
use crate::scene::types::{Camera, OccupancyGrid, Scene};
use crate::tensor::{NodeId, ParamStore, Scalar};
use rand::Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

/// Equidistant depth samples: `depth(k) = near + k·(far-near)/(n-1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingPlan {
    pub n: usize,
    pub near: f64,
    pub far: f64,
}

impl SamplingPlan {
    pub fn new(n: usize, near: f64, far: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidPlan(format!("need at least 2 samples, got {n}")));
        }
        if !(0.0 < near && near < far) {
            return Err(Error::InvalidPlan(format!("need 0 < near < far, got {near}..{far}")));
        }
        Ok(SamplingPlan { n, near, far })
    }

    /// Default plan: 32 samples from half a voxel out to the grid diagonal.
    pub fn for_grid(grid: &OccupancyGrid, n: usize) -> Self {
        SamplingPlan { n, near: 0.5 * grid.voxel_size, far: grid.diagonal() }
    }

    pub fn depth(&self, k: usize) -> f64 {
        self.near + k as f64 * (self.far - self.near) / (self.n - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrsFilter {
    Full,
    Foreground,
    Background,
}

impl OrsFilter {
    pub fn apply(&self, scene: &Scene, label: u8) -> u8 {
        match self {
            OrsFilter::Full => label,
            OrsFilter::Foreground => {
                if scene.taxonomy.is_foreground(label) {
                    label
                } else {
                    0
                }
            }
            OrsFilter::Background => {
                if scene.taxonomy.is_background(label) {
                    label
                } else {
                    0
                }
            }
        }
    }
}

/// Condensed per-pixel depth-sampled label volume. Labels are stored as
/// `(v·U + u)·N + k`, v-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OrsFeature {
    pub width: usize,
    pub height: usize,
    pub plan: SamplingPlan,
    pub camera_index: usize,
    pub filter: OrsFilter,
    pub labels: Vec<u8>,
}

impl OrsFeature {
    pub fn at(&self, u: usize, v: usize, k: usize) -> u8 {
        self.labels[(v * self.width + u) * self.plan.n + k]
    }

    /// Per-pixel maximum class id over depth, scaled for an 8-bit preview.
    pub fn preview_pgm_bytes(&self, num_classes: usize) -> Vec<u8> {
        let n = self.plan.n;
        let scale = 255.0 / (num_classes.max(2) - 1) as f64;
        self.labels
            .chunks(n)
            .map(|col| {
                let m = *col.iter().max().unwrap_or(&0);
                (m as f64 * scale).round() as u8
            })
            .collect()
    }
}

/// Ray through the center of pixel `(u, v)`: the homogeneous image point
/// `(u+0.5, v+0.5, 1)` is unprojected by K, rotated into the ego frame and
/// normalized; the origin is the camera center.
pub fn pixel_ray(camera: &Camera, pixel: (f64, f64)) -> Result<Ray> {
    let k = &camera.intrinsics;
    if k.at(0, 0) == 0.0 || k.at(1, 1) == 0.0 || k.at(2, 2) == 0.0 {
        return Err(Error::InvalidCamera("singular intrinsics".into()));
    }
    let s_img = Vec3::new(pixel.0 + 0.5, pixel.1 + 0.5, 1.0);
    let d_cam = intrinsics_unproject(k, &s_img);
    let d_ego = camera.rotation.transpose().mul_vec(&d_cam);
    Ok(Ray { origin: camera.center_ego(), direction: d_ego.normalized() })
}

pub fn sample_ray(ray: &Ray, plan: &SamplingPlan) -> Vec<Vec3> {
    (0..plan.n)
        .map(|k| ray.origin.add(&ray.direction.scale(plan.depth(k))))
        .collect()
}

/// Voxel lookup by floor division; out-of-range positions read as empty.
pub fn query_grid(grid: &OccupancyGrid, point: &Vec3) -> u8 {
    let e = grid.voxel_size;
    let fi = ((point.x() - grid.origin.x()) / e).floor();
    let fj = ((point.y() - grid.origin.y()) / e).floor();
    let fk = ((point.z() - grid.origin.z()) / e).floor();
    if fi < 0.0 || fj < 0.0 || fk < 0.0 {
        return 0;
    }
    let (i, j, k) = (fi as usize, fj as usize, fk as usize);
    if i >= grid.dims.0 || j >= grid.dims.1 || k >= grid.dims.2 {
        return 0;
    }
    grid.get(i, j, k)
}

/// Render the full label volume for one camera. Pixels are independent and
/// processed in parallel; the output is bit-identical to the sequential
/// per-pixel per-sample lookup.
pub fn render_ors(
    scene: &Scene,
    cam_index: usize,
    plan: &SamplingPlan,
    filter: OrsFilter,
) -> Result<OrsFeature> {
    if cam_index >= scene.cameras.len() {
        return Err(Error::InvalidCamera(format!(
            "camera index {cam_index} out of range ({} cameras)",
            scene.cameras.len()
        )));
    }
    let camera = &scene.cameras[cam_index];
    camera.validate()?;
    let grid = match filter {
        OrsFilter::Full => scene.grid.clone(),
        OrsFilter::Foreground => scene.grid.filtered(&scene.taxonomy.foreground),
        OrsFilter::Background => scene.grid.filtered(&scene.taxonomy.background),
    };
    let (width, height) = camera.image_size;
    let n = plan.n;
    let mut labels = vec![0u8; width * height * n];
    labels.par_chunks_mut(width * n).enumerate().for_each(|(v, row)| {
        for u in 0..width {
            let ray = pixel_ray(camera, (u as f64, v as f64)).expect("validated camera");
            for k in 0..n {
                let p = ray.origin.add(&ray.direction.scale(plan.depth(k)));
                row[u * n + k] = query_grid(&grid, &p);
            }
        }
    });
    Ok(OrsFeature { width, height, plan: *plan, camera_index: cam_index, filter, labels })
}

/// Pointwise merge of a foreground and a background feature; both non-zero
/// is impossible because the taxonomy sets are disjoint.
pub fn merge_features(fg: &OrsFeature, bg: &OrsFeature) -> Result<OrsFeature> {
    if fg.labels.len() != bg.labels.len() || fg.plan != bg.plan {
        return Err(Error::ShapeMismatch {
            op: "merge_features",
            detail: format!("{}x{}x{} vs {}x{}x{}", fg.width, fg.height, fg.plan.n, bg.width, bg.height, bg.plan.n),
        });
    }
    let labels = fg
        .labels
        .iter()
        .zip(&bg.labels)
        .map(|(&f, &b)| {
            debug_assert!(f == 0 || b == 0);
            if f != 0 {
                f
            } else {
                b
            }
        })
        .collect();
    Ok(OrsFeature { filter: OrsFilter::Full, labels, ..fg.clone() })
}

/// Learned embedding of a label volume: per pixel the N class embeddings are
/// concatenated along depth and projected to the model width.
#[derive(Debug, Clone)]
pub struct OrsEmbed {
    pub table: String,
    pub proj: Linear,
    pub num_classes: usize,
    pub class_dim: usize,
    pub samples: usize,
    pub width: usize,
}

impl OrsEmbed {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        num_classes: usize,
        class_dim: usize,
        samples: usize,
        width: usize,
    ) -> Self {
        store.register(
            &format!("{name}.table"),
            crate::nn::normal_tensor(rng, &[num_classes, class_dim], 1.0),
            true,
        );
        let proj = Linear::init(store, rng, &format!("{name}.proj"), samples * class_dim, width, true);
        OrsEmbed { table: format!("{name}.table"), proj, num_classes, class_dim, samples, width }
    }

    /// `[U·V, width]` token rows (v-major pixel order), differentiable
    /// w.r.t. the class table and the projection.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, feature: &OrsFeature) -> Result<NodeId> {
        if feature.plan.n != self.samples {
            return Err(Error::ShapeMismatch {
                op: "ors_embed",
                detail: format!("feature has {} samples, embedder wants {}", feature.plan.n, self.samples),
            });
        }
        if let Some(&bad) = feature.labels.iter().find(|&&c| c as usize >= self.num_classes) {
            return Err(Error::UnknownClass(bad as u32));
        }
        let ids: Vec<usize> = feature.labels.iter().map(|&c| c as usize).collect();
        let table = cx.p(&self.table);
        let emb = cx.g.embedding_lookup(table, &ids)?;
        let pixels = feature.width * feature.height;
        let flat = cx.g.reshape(emb, &[pixels, self.samples * self.class_dim])?;
        self.proj.forward(cx, flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::gen::{generate_scene, level_camera, GeneratorSpec};
    use crate::scene::geom::Mat3;
    use crate::scene::types::*;
    use crate::tensor::Tensor;

    #[test]
    fn principal_axis_ray() {
        let cam = Camera {
            intrinsics: Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            rotation: Mat3::identity(),
            translation: Vec3::new(0.0, 0.0, 0.0),
            image_size: (2, 2),
        };
        let ray = pixel_ray(&cam, (-0.5, -0.5)).unwrap();
        assert!(ray.direction.dist(&Vec3::new(0.0, 0.0, 1.0)) < 1e-12);
        assert!(ray.origin.norm() < 1e-12);
    }

    #[test]
    fn unprojection_arithmetic() {
        // (162-112)/100 = 0.5 before normalization.
        let cam = Camera {
            intrinsics: Mat3([100.0, 0.0, 112.0, 0.0, 100.0, 112.0, 0.0, 0.0, 1.0]),
            rotation: Mat3::identity(),
            translation: Vec3::new(0.0, 0.0, 0.0),
            image_size: (224, 224),
        };
        let d = intrinsics_unproject(&cam.intrinsics, &Vec3::new(162.0, 112.0, 1.0));
        assert_eq!(d.0, [0.5, 0.0, 1.0]);
        let ray = pixel_ray(&cam, (161.5, 111.5)).unwrap();
        let expect = Vec3::new(0.5, 0.0, 1.0).normalized();
        assert!(ray.direction.dist(&expect) < 1e-12);
    }

    #[test]
    fn rays_are_unit_norm() {
        let scene = generate_scene(3, &GeneratorSpec { cameras: 4, ..Default::default() }).unwrap();
        for cam in &scene.cameras {
            for (u, v) in [(0.0, 0.0), (13.0, 7.0), (31.0, 31.0)] {
                let r = pixel_ray(cam, (u, v)).unwrap();
                assert!((r.direction.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sample_ray_axis_aligned() {
        let ray = Ray { origin: Vec3::new(0.5, 0.5, 0.5), direction: Vec3::new(0.0, 0.0, 1.0) };
        let plan = SamplingPlan::new(3, 0.5, 2.5).unwrap();
        let pts = sample_ray(&ray, &plan);
        assert!(pts[0].dist(&Vec3::new(0.5, 0.5, 1.0)) < 1e-12);
        assert!(pts[1].dist(&Vec3::new(0.5, 0.5, 2.0)) < 1e-12);
        assert!(pts[2].dist(&Vec3::new(0.5, 0.5, 3.0)) < 1e-12);
    }

    #[test]
    fn sample_spacing_is_constant() {
        let ray = Ray {
            origin: Vec3::new(0.2, -0.7, 1.3),
            direction: Vec3::new(0.6, 0.48, 0.64).normalized(),
        };
        let plan = SamplingPlan::new(17, 0.25, 9.75).unwrap();
        let pts = sample_ray(&ray, &plan);
        let want = (plan.far - plan.near) / 16.0;
        for w in pts.windows(2) {
            assert!((w[0].dist(&w[1]) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_near_far_gap() {
        let plan = SamplingPlan::new(2, 1.0, 1.0 + 1e-9).unwrap();
        let ray = Ray { origin: Vec3::new(0.0, 0.0, 0.0), direction: Vec3::new(1.0, 0.0, 0.0) };
        let pts = sample_ray(&ray, &plan);
        assert!((pts[1].x() - pts[0].x() - 1e-9).abs() < 1e-15);
    }

    #[test]
    fn query_single_voxel_grid() {
        let mut grid = OccupancyGrid::empty((4, 4, 4), Vec3::new(0.0, 0.0, 0.0), 1.0);
        grid.set(0, 0, 2, 3);
        let pts = [
            Vec3::new(0.5, 0.5, 1.0),
            Vec3::new(0.5, 0.5, 2.0),
            Vec3::new(0.5, 0.5, 3.0),
        ];
        let got: Vec<u8> = pts.iter().map(|p| query_grid(&grid, p)).collect();
        assert_eq!(got, vec![0, 3, 0]);
        // Exactly at the origin corner: voxel (0,0,0).
        grid.set(0, 0, 0, 5);
        assert_eq!(query_grid(&grid, &Vec3::new(0.0, 0.0, 0.0)), 5);
        // Outside all bounds.
        assert_eq!(query_grid(&grid, &Vec3::new(-0.1, 0.5, 0.5)), 0);
        assert_eq!(query_grid(&grid, &Vec3::new(4.1, 0.5, 0.5)), 0);
    }

    #[test]
    fn empty_grid_renders_zero() {
        let grid = OccupancyGrid::empty((4, 4, 4), Vec3::new(0.0, -1.0, 0.0), 0.5);
        let scene = Scene {
            grid,
            taxonomy: ClassTaxonomy::default(),
            boxes: vec![],
            map: vec![],
            cameras: vec![level_camera(Vec3::new(0.25, 0.0, 0.5), 0.0, 7.2, (8, 8))],
            prompt: vec![],
            seed: 0,
        };
        let plan = SamplingPlan::for_grid(&scene.grid, 8);
        for filter in [OrsFilter::Full, OrsFilter::Foreground, OrsFilter::Background] {
            let f = render_ors(&scene, 0, &plan, filter).unwrap();
            assert!(f.labels.iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn decomposition_merge_identity() {
        let scene = generate_scene(17, &GeneratorSpec::default()).unwrap();
        let plan = SamplingPlan::for_grid(&scene.grid, 16);
        let full = render_ors(&scene, 0, &plan, OrsFilter::Full).unwrap();
        let fg = render_ors(&scene, 0, &plan, OrsFilter::Foreground).unwrap();
        let bg = render_ors(&scene, 0, &plan, OrsFilter::Background).unwrap();
        let merged = merge_features(&fg, &bg).unwrap();
        assert_eq!(merged.labels, full.labels);
    }

    #[test]
    fn rotated_camera_renders_flipped_image() {
        // 180° roll about the camera z axis ↔ pixel reversal in u and v,
        // bit-exact for a centered principal point.
        let scene = generate_scene(23, &GeneratorSpec::default()).unwrap();
        let cam = scene.cameras[0].clone();
        let roll = Mat3::from_rows(
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        );
        let rot2 = roll.mul(&cam.rotation);
        let p_ego = cam.center_ego();
        let cam2 = Camera {
            rotation: rot2,
            translation: rot2.mul_vec(&p_ego).scale(-1.0),
            ..cam.clone()
        };
        let mut scene2 = scene.clone();
        scene2.cameras = vec![cam2];
        let plan = SamplingPlan::for_grid(&scene.grid, 8);
        let a = render_ors(&scene, 0, &plan, OrsFilter::Full).unwrap();
        let b = render_ors(&scene2, 0, &plan, OrsFilter::Full).unwrap();
        let (uw, vh) = (a.width, a.height);
        for v in 0..vh {
            for u in 0..uw {
                for k in 0..plan.n {
                    assert_eq!(a.at(u, v, k), b.at(uw - 1 - u, vh - 1 - v, k));
                }
            }
        }
    }

    #[test]
    fn embed_identical_columns_give_identical_rows() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::nn::init_rng(5, "embed");
        let emb = OrsEmbed::init(&mut store, &mut rng, "ors", 7, 4, 6, 8);
        let feature = OrsFeature {
            width: 2,
            height: 2,
            plan: SamplingPlan::new(6, 0.5, 5.5).unwrap(),
            camera_index: 0,
            filter: OrsFilter::Full,
            labels: vec![
                1, 0, 2, 0, 5, 0, // pixel (0,0)
                3, 3, 0, 0, 1, 2, // pixel (1,0)
                1, 0, 2, 0, 5, 0, // pixel (0,1) = same as (0,0)
                0, 0, 0, 0, 0, 0, // pixel (1,1)
            ],
        };
        let mut cx = Ctx::new(&store, false);
        let y = emb.forward(&mut cx, &feature).unwrap();
        let t = cx.value(y);
        assert_eq!(t.shape(), &[4, 8]);
        let row = |r: usize| &t.data()[r * 8..(r + 1) * 8];
        assert_eq!(row(0), row(2));
        assert_ne!(row(0), row(1));
    }

    #[test]
    fn embed_all_empty_with_zero_class0_is_bias() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::nn::init_rng(6, "embed");
        let emb = OrsEmbed::init(&mut store, &mut rng, "ors", 7, 4, 3, 5);
        // Zero the class-0 embedding row.
        {
            let table = &mut store.get_mut("ors.table").value;
            for j in 0..4 {
                table.data_mut()[j] = 0.0;
            }
        }
        store.get_mut("ors.proj.b").value =
            Tensor::new(vec![5], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let feature = OrsFeature {
            width: 3,
            height: 1,
            plan: SamplingPlan::new(3, 0.5, 2.5).unwrap(),
            camera_index: 0,
            filter: OrsFilter::Full,
            labels: vec![0; 9],
        };
        let mut cx = Ctx::new(&store, false);
        let y = emb.forward(&mut cx, &feature).unwrap();
        for r in 0..3 {
            for j in 0..5 {
                let got = cx.value(y).data()[r * 5 + j];
                let want = 0.1 * (j + 1) as f64;
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_rejects_unknown_class() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::nn::init_rng(7, "embed");
        let emb = OrsEmbed::init(&mut store, &mut rng, "ors", 4, 2, 2, 3);
        let feature = OrsFeature {
            width: 1,
            height: 1,
            plan: SamplingPlan::new(2, 0.5, 1.5).unwrap(),
            camera_index: 0,
            filter: OrsFilter::Full,
            labels: vec![1, 9],
        };
        let mut cx = Ctx::new(&store, false);
        assert!(matches!(emb.forward(&mut cx, &feature), Err(Error::UnknownClass(9))));
    }
}
