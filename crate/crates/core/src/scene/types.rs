//! Domain types for semantic driving scenes.

use super::geom::{Mat3, Vec3};
use crate::error::{Error, Result};

/// Fixed class taxonomy. Class 0 is reserved for empty space.
pub const CLASS_EMPTY: u8 = 0;
pub const CLASS_ROAD: u8 = 1;
pub const CLASS_BUILDING: u8 = 2;
pub const CLASS_VEGETATION: u8 = 3;
pub const CLASS_POLE: u8 = 4;
pub const CLASS_VEHICLE: u8 = 5;
pub const CLASS_PEDESTRIAN: u8 = 6;
pub const NUM_CLASSES: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTaxonomy {
    pub names: Vec<String>,
    pub foreground: Vec<u8>,
    pub background: Vec<u8>,
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        ClassTaxonomy {
            names: ["empty", "road", "building", "vegetation", "pole", "vehicle", "pedestrian"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            foreground: vec![CLASS_VEHICLE, CLASS_PEDESTRIAN],
            background: vec![CLASS_ROAD, CLASS_BUILDING, CLASS_VEGETATION, CLASS_POLE],
        }
    }
}

impl ClassTaxonomy {
    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn is_foreground(&self, c: u8) -> bool {
        self.foreground.contains(&c)
    }

    pub fn is_background(&self, c: u8) -> bool {
        self.background.contains(&c)
    }

    /// Disjoint sets, neither containing class 0, jointly covering all ids.
    pub fn validate(&self) -> Result<()> {
        if self.names.is_empty() {
            return Err(Error::InvalidScene("taxonomy has no classes".into()));
        }
        let n = self.names.len() as u8;
        for &c in self.foreground.iter().chain(&self.background) {
            if c == 0 || c >= n {
                return Err(Error::InvalidScene(format!("taxonomy set holds invalid class {c}")));
            }
        }
        for &c in &self.foreground {
            if self.background.contains(&c) {
                return Err(Error::InvalidScene(format!("class {c} in both taxonomy sets")));
            }
        }
        for c in 1..n {
            if !self.foreground.contains(&c) && !self.background.contains(&c) {
                return Err(Error::InvalidScene(format!("class {c} in neither taxonomy set")));
            }
        }
        Ok(())
    }
}

/// Axis-aligned semantic voxel volume in the ego frame.
///
/// `dims = (H, W, D)` counts voxels along ego x, y, z; label index is
/// `(i·W + j)·D + k`. Voxel `(i,j,k)` spans
/// `origin + [i,i+1)x[j,j+1)x[k,k+1) · voxel_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub dims: (usize, usize, usize),
    pub origin: Vec3,
    pub voxel_size: f64,
    pub labels: Vec<u8>,
}

impl OccupancyGrid {
    pub fn empty(dims: (usize, usize, usize), origin: Vec3, voxel_size: f64) -> Self {
        OccupancyGrid { dims, origin, voxel_size, labels: vec![0; dims.0 * dims.1 * dims.2] }
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims.1 + j) * self.dims.2 + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, c: u8) {
        let idx = self.index(i, j, k);
        self.labels[idx] = c;
    }

    /// Ego-frame center of a voxel.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin.add(&Vec3::new(
            (i as f64 + 0.5) * self.voxel_size,
            (j as f64 + 0.5) * self.voxel_size,
            (k as f64 + 0.5) * self.voxel_size,
        ))
    }

    /// Length of the full grid diagonal, the default far plane.
    pub fn diagonal(&self) -> f64 {
        let e = self.voxel_size;
        Vec3::new(self.dims.0 as f64 * e, self.dims.1 as f64 * e, self.dims.2 as f64 * e).norm()
    }

    /// Copy with labels outside `keep` replaced by empty.
    pub fn filtered(&self, keep: &[u8]) -> OccupancyGrid {
        let labels = self
            .labels
            .iter()
            .map(|&c| if keep.contains(&c) { c } else { 0 })
            .collect();
        OccupancyGrid { labels, ..self.clone() }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let numel = self.dims.0 * self.dims.1 * self.dims.2;
        if numel == 0 {
            return Err(Error::InvalidScene("grid has a zero dimension".into()));
        }
        if self.labels.len() != numel {
            return Err(Error::InvalidScene(format!(
                "labels length {} does not match dims {:?}",
                self.labels.len(),
                self.dims
            )));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::InvalidScene(format!("voxel_size {} must be > 0", self.voxel_size)));
        }
        if let Some(&bad) = self.labels.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::InvalidScene(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(())
    }
}

/// Sign patterns of the fixed corner ordering: 3-bit Gray code, bit 2 -> x,
/// bit 1 -> y, bit 0 -> z, set bit meaning +.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [1.0, 1.0, -1.0],
    [1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, -1.0, -1.0],
];

/// Oriented 3-D bounding box stored as its 8 corners in the fixed ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox3D {
    pub category: u8,
    pub corners: [Vec3; 8],
}

impl BoundingBox3D {
    /// Axis-aligned box from center and full extents.
    pub fn axis_aligned(category: u8, center: Vec3, extents: Vec3) -> Self {
        let mut corners = [Vec3::new(0.0, 0.0, 0.0); 8];
        for (c, signs) in corners.iter_mut().zip(CORNER_SIGNS.iter()) {
            *c = center.add(&Vec3::new(
                signs[0] * extents.x() * 0.5,
                signs[1] * extents.y() * 0.5,
                signs[2] * extents.z() * 0.5,
            ));
        }
        BoundingBox3D { category, corners }
    }

    pub fn center(&self) -> Vec3 {
        let mut c = Vec3::new(0.0, 0.0, 0.0);
        for p in &self.corners {
            c = c.add(p);
        }
        c.scale(1.0 / 8.0)
    }

    /// Half-axis vectors recovered from the corner sign pattern.
    pub fn half_axes(&self) -> [Vec3; 3] {
        let mut axes = [Vec3::new(0.0, 0.0, 0.0); 3];
        for (a, axis) in axes.iter_mut().enumerate() {
            let mut acc = Vec3::new(0.0, 0.0, 0.0);
            for (p, signs) in self.corners.iter().zip(CORNER_SIGNS.iter()) {
                acc = acc.add(&p.scale(signs[a]));
            }
            *axis = acc.scale(1.0 / 8.0);
        }
        axes
    }

    /// The 8 corners must form a rectangular cuboid within tolerance.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let center = self.center();
        let axes = self.half_axes();
        for a in 0..3 {
            for b in (a + 1)..3 {
                if axes[a].dot(&axes[b]).abs() > tol {
                    return Err(Error::InvalidScene(format!(
                        "box axes {a},{b} not orthogonal (dot {})",
                        axes[a].dot(&axes[b])
                    )));
                }
            }
        }
        for (p, signs) in self.corners.iter().zip(CORNER_SIGNS.iter()) {
            let mut q = center;
            for (axis, &s) in axes.iter().zip(signs.iter()) {
                q = q.add(&axis.scale(s));
            }
            if q.dist(p) > tol {
                return Err(Error::InvalidScene(format!(
                    "corner {:?} deviates from cuboid by {}",
                    p.0,
                    q.dist(p)
                )));
            }
        }
        Ok(())
    }

    /// True if the point lies inside the (possibly rotated) cuboid, with a
    /// margin in length units.
    pub fn contains(&self, p: &Vec3, margin: f64) -> bool {
        let center = self.center();
        let rel = p.sub(&center);
        for axis in self.half_axes() {
            let half = axis.norm();
            if half < 1e-12 {
                if rel.dot(&axis).abs() > margin {
                    return false;
                }
                continue;
            }
            let along = rel.dot(&axis) / half;
            if along.abs() > half + margin {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MapClass {
    Crossing,
    Divider,
    Boundary,
}

impl MapClass {
    pub fn id(&self) -> u8 {
        match self {
            MapClass::Crossing => 0,
            MapClass::Divider => 1,
            MapClass::Boundary => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MapClass::Crossing => "crossing",
            MapClass::Divider => "divider",
            MapClass::Boundary => "boundary",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "crossing" => Ok(MapClass::Crossing),
            "divider" => Ok(MapClass::Divider),
            "boundary" => Ok(MapClass::Boundary),
            _ => Err(Error::InvalidScene(format!("unknown map class {s:?}"))),
        }
    }
}

pub const NUM_MAP_CLASSES: usize = 3;
pub const MAP_POLYLINE_POINTS: usize = 8;

/// Vectorized map element: exactly 8 ordered ego-frame points.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPolyline {
    pub category: MapClass,
    pub points: [Vec3; MAP_POLYLINE_POINTS],
}

impl MapPolyline {
    pub fn validate(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if w[0].dist(&w[1]) == 0.0 {
                return Err(Error::InvalidScene("consecutive polyline points coincide".into()));
            }
        }
        Ok(())
    }
}

/// Arc-length uniform resampling to exactly 8 points, endpoints preserved.
pub fn resample_polyline(points: &[Vec3]) -> Result<[Vec3; MAP_POLYLINE_POINTS]> {
    if points.len() < 2 {
        return Err(Error::InvalidScene("polyline needs at least 2 points".into()));
    }
    let mut cum = vec![0.0f64; points.len()];
    for i in 1..points.len() {
        cum[i] = cum[i - 1] + points[i].dist(&points[i - 1]);
    }
    let total = cum[points.len() - 1];
    if total == 0.0 {
        return Err(Error::InvalidScene("polyline points all coincide".into()));
    }
    let mut out = [Vec3::new(0.0, 0.0, 0.0); MAP_POLYLINE_POINTS];
    out[0] = points[0];
    out[MAP_POLYLINE_POINTS - 1] = points[points.len() - 1];
    let mut seg = 0usize;
    for (m, slot) in out.iter_mut().enumerate().take(MAP_POLYLINE_POINTS - 1).skip(1) {
        let target = total * m as f64 / (MAP_POLYLINE_POINTS - 1) as f64;
        while seg + 2 < points.len() && cum[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cum[seg + 1] - cum[seg];
        let frac = if seg_len > 0.0 { (target - cum[seg]) / seg_len } else { 0.0 };
        *slot = points[seg].add(&points[seg + 1].sub(&points[seg]).scale(frac));
    }
    Ok(out)
}

/// Pinhole camera: intrinsics K, rigid ego-to-camera transform (R, t).
/// Camera frame: z forward, x right, y down.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: Mat3,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub image_size: (usize, usize),
}

impl Camera {
    /// Camera center in the ego frame: -Rᵀ t.
    pub fn center_ego(&self) -> Vec3 {
        self.rotation.transpose().mul_vec(&self.translation).scale(-1.0)
    }

    pub fn ego_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.mul_vec(p).add(&self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if k.at(1, 0) != 0.0 || k.at(2, 0) != 0.0 || k.at(2, 1) != 0.0 || k.at(2, 2) != 1.0 {
            return Err(Error::InvalidCamera("intrinsics not upper-triangular with unit scale".into()));
        }
        if !(k.at(0, 0) > 0.0 && k.at(1, 1) > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        let r = &self.rotation;
        if (r.det() - 1.0).abs() >= 1e-9 {
            return Err(Error::InvalidCamera(format!("det R = {} != 1", r.det())));
        }
        let rtr = r.transpose().mul(r);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rtr.at(i, j) - want).abs() >= 1e-9 {
                    return Err(Error::InvalidCamera("RᵀR deviates from identity".into()));
                }
            }
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        Ok(())
    }
}

/// A full semantic scene: voxels, annotations, cameras, prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub grid: OccupancyGrid,
    pub taxonomy: ClassTaxonomy,
    pub boxes: Vec<BoundingBox3D>,
    pub map: Vec<MapPolyline>,
    pub cameras: Vec<Camera>,
    pub prompt: Vec<u32>,
    pub seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.taxonomy.validate()?;
        self.grid.validate(self.taxonomy.num_classes())?;
        for b in &self.boxes {
            b.validate(1e-6)?;
            if !self.taxonomy.is_foreground(b.category) {
                return Err(Error::InvalidScene(format!(
                    "box category {} is not a foreground class",
                    b.category
                )));
            }
        }
        for m in &self.map {
            m.validate()?;
        }
        if self.cameras.is_empty() {
            return Err(Error::InvalidScene("scene has no cameras".into()));
        }
        for c in &self.cameras {
            c.validate()?;
        }
        Ok(())
    }
}
