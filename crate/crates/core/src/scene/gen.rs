//! Seeded procedural scene generator.
//!
//! Scenes have a road band along ego x, flanking buildings, vegetation and
//! poles, and vehicles/pedestrians as voxel cuboids with exactly matching
//! box annotations. All randomness flows from one seeded stream, so a
//! (seed, spec) pair is bit-reproducible.

use super::geom::{Mat3, Vec3};
use super::types::*;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    /// Voxel counts along ego (x, y, z).
    pub dims: (usize, usize, usize),
    pub voxel_size: f64,
    /// Inclusive vehicle count range per scene.
    pub vehicles: (usize, usize),
    pub buildings: (usize, usize),
    pub pedestrians: (usize, usize),
    pub cameras: usize,
    /// Pixel extents (U, V) of every camera.
    pub image_size: (usize, usize),
    pub vocab_size: usize,
    pub prompt_len: (usize, usize),
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            dims: (32, 32, 16),
            voxel_size: 0.5,
            vehicles: (1, 4),
            buildings: (1, 4),
            pedestrians: (0, 2),
            cameras: 1,
            image_size: (32, 32),
            vocab_size: 32,
            prompt_len: (2, 6),
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w, d) = self.dims;
        if h == 0 || w == 0 || d == 0 || h > 64 || w > 64 || d > 64 {
            return Err(Error::InfeasibleSpec(format!("dims {:?} outside 1..=64 per axis", self.dims)));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::InfeasibleSpec("voxel_size must be positive".into()));
        }
        if self.vehicles.0 > self.vehicles.1 || self.vehicles.1 > 8 {
            return Err(Error::InfeasibleSpec(format!("vehicle range {:?} outside 0..=8", self.vehicles)));
        }
        if self.buildings.0 > self.buildings.1 || self.buildings.1 > 6 {
            return Err(Error::InfeasibleSpec(format!("building range {:?} outside 0..=6", self.buildings)));
        }
        if self.pedestrians.0 > self.pedestrians.1 || self.pedestrians.1 > 4 {
            return Err(Error::InfeasibleSpec(format!(
                "pedestrian range {:?} outside 0..=4",
                self.pedestrians
            )));
        }
        if self.cameras == 0 || self.cameras > 6 {
            return Err(Error::InfeasibleSpec(format!("camera count {} outside 1..=6", self.cameras)));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::InfeasibleSpec("image size must be positive".into()));
        }
        if self.vocab_size == 0 || self.prompt_len.0 > self.prompt_len.1 {
            return Err(Error::InfeasibleSpec("bad prompt configuration".into()));
        }
        // Vehicles occupy disjoint 6-voxel slots on two lanes.
        let slots = 2 * (self.dims.0 / 6);
        if self.vehicles.1 + self.pedestrians.1 > slots {
            return Err(Error::InfeasibleSpec(format!(
                "{} foreground entities exceed road capacity {slots}",
                self.vehicles.1 + self.pedestrians.1
            )));
        }
        Ok(())
    }
}

fn fill_cuboid(grid: &mut OccupancyGrid, i0: usize, i1: usize, j0: usize, j1: usize, k0: usize, k1: usize, c: u8) {
    for i in i0..i1 {
        for j in j0..j1 {
            for k in k0..k1 {
                grid.set(i, j, k, c);
            }
        }
    }
}

/// Ego-frame axis-aligned box exactly covering voxel span `[i0,i1)x[j0,j1)x[k0,k1)`.
fn voxel_span_box(grid: &OccupancyGrid, category: u8, i0: usize, i1: usize, j0: usize, j1: usize, k0: usize, k1: usize) -> BoundingBox3D {
    let e = grid.voxel_size;
    let lo = grid.origin.add(&Vec3::new(i0 as f64 * e, j0 as f64 * e, k0 as f64 * e));
    let hi = grid.origin.add(&Vec3::new(i1 as f64 * e, j1 as f64 * e, k1 as f64 * e));
    let center = lo.add(&hi).scale(0.5);
    let extents = hi.sub(&lo);
    BoundingBox3D::axis_aligned(category, center, extents)
}

/// Level camera at `p_ego` yawed about ego z (0 = facing ego +x).
pub fn level_camera(p_ego: Vec3, yaw: f64, focal: f64, image_size: (usize, usize)) -> Camera {
    let (s, c) = yaw.sin_cos();
    // Rows are the camera axes (right, down, forward) in ego coordinates.
    let rotation = Mat3::from_rows(
        Vec3::new(s, -c, 0.0),
        Vec3::new(0.0, 0.0, -1.0),
        Vec3::new(c, s, 0.0),
    );
    let translation = rotation.mul_vec(&p_ego).scale(-1.0);
    Camera {
        intrinsics: Mat3([
            focal,
            0.0,
            image_size.0 as f64 * 0.5,
            0.0,
            focal,
            image_size.1 as f64 * 0.5,
            0.0,
            0.0,
            1.0,
        ]),
        rotation,
        translation,
        image_size,
    }
}

pub fn generate_scene(seed: u64, spec: &GeneratorSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (h, w, d) = spec.dims;
    let e = spec.voxel_size;
    let taxonomy = ClassTaxonomy::default();

    // Grid centered laterally on the ego, ground at z = 0.
    let origin = Vec3::new(0.0, -(w as f64) * e * 0.5, 0.0);
    let mut grid = OccupancyGrid::empty(spec.dims, origin, e);

    // Road band along x, centered in y.
    let road_half = (w / 4).clamp(2, 6);
    let j_mid = w / 2;
    let (road_j0, road_j1) = (j_mid - road_half, j_mid + road_half);
    fill_cuboid(&mut grid, 0, h, road_j0, road_j1, 0, 1, CLASS_ROAD);

    // Buildings on alternating sides, clear of the road.
    let n_buildings = rng.gen_range(spec.buildings.0..=spec.buildings.1);
    for b in 0..n_buildings {
        let left = b % 2 == 0;
        let bw = rng.gen_range(2..=4.min(w / 4).max(2));
        let bl = rng.gen_range(3..=6.min(h / 2).max(3));
        let bh = rng.gen_range(3..=(d - 1).max(3).min(8));
        let i0 = rng.gen_range(0..h.saturating_sub(bl).max(1));
        let (j0, j1) = if left {
            let j1 = road_j0.saturating_sub(1);
            (j1.saturating_sub(bw), j1)
        } else {
            let j0 = (road_j1 + 1).min(w - 1);
            (j0, (j0 + bw).min(w))
        };
        if j0 < j1 {
            fill_cuboid(&mut grid, i0, (i0 + bl).min(h), j0, j1, 0, bh, CLASS_BUILDING);
        }
    }

    // Vegetation blobs just outside the road edges.
    let n_veg = rng.gen_range(1..=3usize);
    for _ in 0..n_veg {
        let left = rng.gen_bool(0.5);
        let i0 = rng.gen_range(0..h.saturating_sub(2).max(1));
        let j = if left { road_j0.saturating_sub(2) } else { (road_j1 + 1).min(w - 1) };
        let vh = rng.gen_range(1..=3.min(d - 1).max(1));
        for di in 0..2usize {
            for dj in 0..2usize {
                let (i, j2) = ((i0 + di).min(h - 1), (j + dj).min(w - 1));
                for k in 0..vh {
                    if grid.get(i, j2, k) == CLASS_EMPTY {
                        grid.set(i, j2, k, CLASS_VEGETATION);
                    }
                }
            }
        }
    }

    // Poles at the road edge; background occupancy without any box.
    let n_poles = rng.gen_range(1..=2usize);
    for _ in 0..n_poles {
        let left = rng.gen_bool(0.5);
        let i = rng.gen_range(0..h);
        let j = if left { road_j0.saturating_sub(1) } else { road_j1.min(w - 1) };
        let ph = (d * 3 / 4).max(2);
        for k in 0..ph {
            if grid.get(i, j, k) == CLASS_EMPTY {
                grid.set(i, j, k, CLASS_POLE);
            }
        }
    }

    // Foreground entities in disjoint x-slots on the two lanes so every
    // foreground voxel lies in exactly one annotated box.
    let mut boxes = Vec::new();
    let slot_len = 6usize;
    let mut slots: Vec<(usize, bool)> = Vec::new();
    for s in 0..h / slot_len {
        slots.push((s, true));
        slots.push((s, false));
    }
    // Deterministic shuffle.
    for i in (1..slots.len()).rev() {
        let j = rng.gen_range(0..=i);
        slots.swap(i, j);
    }
    let mut slot_iter = slots.into_iter();

    let n_vehicles = rng.gen_range(spec.vehicles.0..=spec.vehicles.1);
    for _ in 0..n_vehicles {
        let (slot, left_lane) = slot_iter.next().ok_or_else(|| {
            Error::InfeasibleSpec("ran out of road slots for vehicles".into())
        })?;
        let vl = rng.gen_range(3..=4usize);
        let vw = 2usize;
        let vh = 2.min(d - 1).max(1);
        let i0 = slot * slot_len + rng.gen_range(0..=(slot_len - vl));
        let j0 = if left_lane { j_mid.saturating_sub(vw) } else { j_mid };
        let (k0, k1) = (1usize, (1 + vh).min(d));
        fill_cuboid(&mut grid, i0, i0 + vl, j0, j0 + vw, k0, k1, CLASS_VEHICLE);
        boxes.push(voxel_span_box(&grid, CLASS_VEHICLE, i0, i0 + vl, j0, j0 + vw, k0, k1));
    }

    let n_peds = rng.gen_range(spec.pedestrians.0..=spec.pedestrians.1);
    for _ in 0..n_peds {
        let (slot, left_lane) = slot_iter.next().ok_or_else(|| {
            Error::InfeasibleSpec("ran out of road slots for pedestrians".into())
        })?;
        let i0 = slot * slot_len + rng.gen_range(0..slot_len);
        let j0 = if left_lane { road_j0 } else { road_j1 - 1 };
        let (k0, k1) = (1usize, (1 + 3).min(d));
        fill_cuboid(&mut grid, i0, i0 + 1, j0, j0 + 1, k0, k1, CLASS_PEDESTRIAN);
        boxes.push(voxel_span_box(&grid, CLASS_PEDESTRIAN, i0, i0 + 1, j0, j0 + 1, k0, k1));
    }

    // Map polylines at the road surface: two boundaries, one divider, and
    // sometimes a crossing.
    let surf = e;
    let x_end = h as f64 * e;
    let y_at = |j: usize| origin.y() + j as f64 * e;
    let mut map = Vec::new();
    for (class, y) in [
        (MapClass::Boundary, y_at(road_j0)),
        (MapClass::Boundary, y_at(road_j1)),
        (MapClass::Divider, y_at(j_mid)),
    ] {
        let pts = vec![Vec3::new(0.0, y, surf), Vec3::new(x_end, y, surf)];
        map.push(MapPolyline { category: class, points: resample_polyline(&pts)? });
    }
    if rng.gen_bool(0.5) {
        let x = rng.gen_range(2..h.saturating_sub(2).max(3)) as f64 * e;
        let pts = vec![
            Vec3::new(x, y_at(road_j0), surf),
            Vec3::new(x, y_at(road_j1), surf),
        ];
        map.push(MapPolyline { category: MapClass::Crossing, points: resample_polyline(&pts)? });
    }

    // Cameras fanned around the ego position just behind the grid center.
    let cam_height = (d as f64 * e * 0.35).max(e);
    let p_ego = Vec3::new(e, 0.0, cam_height);
    let focal = spec.image_size.0 as f64 * 0.9;
    let mut cameras = Vec::new();
    for c in 0..spec.cameras {
        let yaw = c as f64 * std::f64::consts::TAU / spec.cameras.max(1) as f64;
        cameras.push(level_camera(p_ego, yaw, focal, spec.image_size));
    }

    let prompt_len = rng.gen_range(spec.prompt_len.0..=spec.prompt_len.1);
    let prompt: Vec<u32> = (0..prompt_len).map(|_| rng.gen_range(0..spec.vocab_size as u32)).collect();

    let scene = Scene { grid, taxonomy, boxes, map, cameras, prompt, seed };
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let spec = GeneratorSpec::default();
        let a = generate_scene(7, &spec).unwrap();
        let b = generate_scene(7, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(8, &spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_vehicles_means_no_foreground() {
        let spec = GeneratorSpec {
            vehicles: (0, 0),
            pedestrians: (0, 0),
            ..GeneratorSpec::default()
        };
        let s = generate_scene(3, &spec).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s
            .grid
            .labels
            .iter()
            .all(|&c| !s.taxonomy.is_foreground(c)));
    }

    #[test]
    fn every_foreground_voxel_in_exactly_one_box() {
        let spec = GeneratorSpec { vehicles: (3, 3), pedestrians: (1, 1), ..GeneratorSpec::default() };
        for seed in [1u64, 5, 9] {
            let s = generate_scene(seed, &spec).unwrap();
            let (h, w, d) = s.grid.dims;
            for i in 0..h {
                for j in 0..w {
                    for k in 0..d {
                        let c = s.grid.get(i, j, k);
                        if !s.taxonomy.is_foreground(c) {
                            continue;
                        }
                        let center = s.grid.voxel_center(i, j, k);
                        let hits = s.boxes.iter().filter(|b| b.contains(&center, 1e-9)).count();
                        assert_eq!(hits, 1, "voxel ({i},{j},{k}) class {c} in {hits} boxes");
                    }
                }
            }
        }
    }

    #[test]
    fn map_polylines_have_eight_points() {
        let s = generate_scene(11, &GeneratorSpec::default()).unwrap();
        assert!(s.map.len() >= 3);
        for m in &s.map {
            assert_eq!(m.points.len(), 8);
            m.validate().unwrap();
        }
    }

    #[test]
    fn infeasible_spec_rejected() {
        let spec = GeneratorSpec {
            dims: (12, 32, 16),
            vehicles: (8, 8),
            pedestrians: (4, 4),
            ..GeneratorSpec::default()
        };
        assert!(matches!(generate_scene(1, &spec), Err(Error::InfeasibleSpec(_))));
    }

    #[test]
    fn taxonomy_filter_merge_reconstructs() {
        let s = generate_scene(21, &GeneratorSpec::default()).unwrap();
        let fg = s.grid.filtered(&s.taxonomy.foreground);
        let bg = s.grid.filtered(&s.taxonomy.background);
        for idx in 0..s.grid.labels.len() {
            let (f, b) = (fg.labels[idx], bg.labels[idx]);
            assert!(f == 0 || b == 0, "voxel {idx} in both partitions");
            let merged = if f != 0 { f } else { b };
            assert_eq!(merged, s.grid.labels[idx]);
        }
    }
}
