//! Reference rasterizer: the ground-truth image oracle.
//!
//! Per pixel, the camera ray is marched in steps of a quarter voxel; the
//! first non-empty voxel sets the color (class palette shaded by depth),
//! misses fall back to a fixed horizon gradient. Constants are part of the
//! format: reference images are byte-reproducible.

use super::types::Scene;
use crate::error::{Error, Result};
use crate::formats::Image;
use crate::ors::{pixel_ray, query_grid};
use rayon::prelude::*;

/// RGB palette per class id; class 0 is never drawn.
pub const PALETTE: [[f64; 3]; 7] = [
    [0.0, 0.0, 0.0],
    [0.25, 0.25, 0.28],
    [0.55, 0.50, 0.45],
    [0.20, 0.50, 0.25],
    [0.80, 0.75, 0.30],
    [0.85, 0.20, 0.20],
    [0.90, 0.60, 0.10],
];

pub const HORIZON_TOP: [f64; 3] = [0.35, 0.55, 0.85];
pub const HORIZON_BOTTOM: [f64; 3] = [0.78, 0.82, 0.88];

/// Depth shading floor: far hits keep 20% of the class color.
pub const SHADE_FLOOR: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
pub struct RasterPlan {
    pub near: f64,
    pub far: f64,
    pub step: f64,
}

impl RasterPlan {
    /// Quarter-voxel stepping out to the grid diagonal.
    pub fn for_scene(scene: &Scene) -> Self {
        let step = scene.grid.voxel_size / 4.0;
        RasterPlan { near: step, far: scene.grid.diagonal(), step }
    }
}

pub fn horizon_color(v: usize, height: usize) -> [f64; 3] {
    let t = (v as f64 + 0.5) / height as f64;
    [
        HORIZON_TOP[0] + (HORIZON_BOTTOM[0] - HORIZON_TOP[0]) * t,
        HORIZON_TOP[1] + (HORIZON_BOTTOM[1] - HORIZON_TOP[1]) * t,
        HORIZON_TOP[2] + (HORIZON_BOTTOM[2] - HORIZON_TOP[2]) * t,
    ]
}

pub fn shade(label: u8, depth: f64, far: f64) -> [f64; 3] {
    let f = (1.0 - depth / far).clamp(SHADE_FLOOR, 1.0);
    let c = PALETTE[label as usize];
    [c[0] * f, c[1] * f, c[2] * f]
}

/// First non-empty voxel along the pixel ray, by fixed-step search.
pub fn first_hit(scene: &Scene, cam_index: usize, u: usize, v: usize, plan: &RasterPlan) -> Option<(u8, f64)> {
    let cam = &scene.cameras[cam_index];
    let ray = pixel_ray(cam, (u as f64, v as f64)).expect("validated camera");
    let mut depth = plan.near;
    while depth <= plan.far {
        let p = ray.origin.add(&ray.direction.scale(depth));
        let label = query_grid(&scene.grid, &p);
        if label != 0 {
            return Some((label, depth));
        }
        depth += plan.step;
    }
    None
}

pub fn rasterize_reference(scene: &Scene, cam_index: usize) -> Result<Image> {
    if cam_index >= scene.cameras.len() {
        return Err(Error::InvalidCamera(format!(
            "camera index {cam_index} out of range ({} cameras)",
            scene.cameras.len()
        )));
    }
    let plan = RasterPlan::for_scene(scene);
    let (width, height) = scene.cameras[cam_index].image_size;
    let mut rgb = vec![0.0f64; width * height * 3];
    rgb.par_chunks_mut(width * 3).enumerate().for_each(|(v, row)| {
        for u in 0..width {
            let color = match first_hit(scene, cam_index, u, v, &plan) {
                Some((label, depth)) => shade(label, depth, plan.far),
                None => horizon_color(v, height),
            };
            row[u * 3..u * 3 + 3].copy_from_slice(&color);
        }
    });
    Ok(Image { width, height, rgb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::gen::{generate_scene, level_camera, GeneratorSpec};
    use crate::scene::geom::Vec3;
    use crate::scene::types::*;

    fn empty_scene() -> Scene {
        let grid = OccupancyGrid::empty((8, 8, 8), Vec3::new(0.0, -2.0, 0.0), 0.5);
        Scene {
            grid,
            taxonomy: ClassTaxonomy::default(),
            boxes: vec![],
            map: vec![],
            cameras: vec![level_camera(Vec3::new(0.5, 0.0, 1.0), 0.0, 28.8, (16, 16))],
            prompt: vec![],
            seed: 0,
        }
    }

    #[test]
    fn empty_grid_gives_pure_horizon() {
        let scene = empty_scene();
        let img = rasterize_reference(&scene, 0).unwrap();
        for v in 0..img.height {
            let want = horizon_color(v, img.height);
            for u in 0..img.width {
                let got = img.pixel(u, v);
                assert_eq!(got, want, "pixel ({u},{v})");
            }
        }
    }

    #[test]
    fn principal_axis_voxel_hits_center() {
        let mut scene = empty_scene();
        // One voxel straight ahead of the camera on the principal axis.
        let cam_pos = Vec3::new(0.5, 0.0, 1.0);
        let (i, j, k) = (6, 3, 1);
        scene.grid.set(i, j, k, CLASS_BUILDING);
        // Voxel (6,3,1) center: origin + (6.5·e, 3.5·e, 1.5·e).
        let c = scene.grid.voxel_center(i, j, k);
        assert!((c.y() - cam_pos.y()).abs() < 0.26);
        assert!((c.z() - cam_pos.z()).abs() < 0.26);
        let img = rasterize_reference(&scene, 0).unwrap();
        let (cx, cy) = (img.width / 2, img.height / 2);
        let center_px = img.pixel(cx, cy);
        let horizon = horizon_color(cy, img.height);
        assert_ne!(center_px, horizon, "center pixel should be a hit");
        // A corner pixel stays horizon.
        assert_eq!(img.pixel(0, 0), horizon_color(0, img.height));
    }

    #[test]
    fn hit_depth_is_first_nonempty_sample() {
        let spec = GeneratorSpec::default();
        let scene = generate_scene(5, &spec).unwrap();
        let plan = RasterPlan::for_scene(&scene);
        for (u, v) in [(3usize, 20usize), (16, 16), (28, 25)] {
            if let Some((label, depth)) = first_hit(&scene, 0, u, v, &plan) {
                assert_ne!(label, 0);
                // Every strictly earlier sample must be empty.
                let cam = &scene.cameras[0];
                let ray = pixel_ray(cam, (u as f64, v as f64)).unwrap();
                let mut d = plan.near;
                while d < depth {
                    let p = ray.origin.add(&ray.direction.scale(d));
                    assert_eq!(query_grid(&scene.grid, &p), 0);
                    d += plan.step;
                }
            }
        }
    }
}
