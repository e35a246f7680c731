//! Foreground-weighted denoising loss: project 3-D boxes to the image
//! plane, rasterize the per-pixel weight mask, and apply it to the
//! squared-error objective.
//!
//! Weights are `2 - a/(U·V)` inside the axis-aligned hull of a projected
//! box (a = hull area at latent resolution) and exactly 1 elsewhere, so
//! smaller boxes weigh more; overlaps are resolved by the smallest area.

use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::scene::types::{BoundingBox3D, Camera};
use crate::tensor::{NodeId, Scalar, Tensor};

/// Corners closer than this to the image plane are culled.
pub const Z_EPS: f64 = 1e-6;

/// Pixel-space axis-aligned hull of one projected box, clipped to the
/// latent extents, with its area in latent pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedBox {
    pub source_index: usize,
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
    pub area: f64,
}

/// Project the 8 corners through the camera, drop corners behind the image
/// plane, take the clipped axis-aligned hull at latent resolution. Returns
/// None when nothing of the box survives.
pub fn project_box(
    bbox: &BoundingBox3D,
    source_index: usize,
    camera: &Camera,
    latent_size: (usize, usize),
) -> Option<ProjectedBox> {
    let k = &camera.intrinsics;
    let (fx, skew, cx) = (k.at(0, 0), k.at(0, 1), k.at(0, 2));
    let (fy, cy) = (k.at(1, 1), k.at(1, 2));
    let su = latent_size.0 as f64 / camera.image_size.0 as f64;
    let sv = latent_size.1 as f64 / camera.image_size.1 as f64;
    let mut u_min = f64::INFINITY;
    let mut u_max = f64::NEG_INFINITY;
    let mut v_min = f64::INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    let mut survivors = 0usize;
    for corner in &bbox.corners {
        let p = camera.ego_to_camera(corner);
        if p.z() <= Z_EPS {
            continue;
        }
        survivors += 1;
        let u = ((fx * p.x() + skew * p.y()) / p.z() + cx) * su;
        let v = (fy * p.y() / p.z() + cy) * sv;
        u_min = u_min.min(u);
        u_max = u_max.max(u);
        v_min = v_min.min(v);
        v_max = v_max.max(v);
    }
    if survivors == 0 {
        return None;
    }
    let u_min = u_min.clamp(0.0, latent_size.0 as f64);
    let u_max = u_max.clamp(0.0, latent_size.0 as f64);
    let v_min = v_min.clamp(0.0, latent_size.1 as f64);
    let v_max = v_max.clamp(0.0, latent_size.1 as f64);
    if u_min >= u_max || v_min >= v_max {
        return None;
    }
    let area = (u_max - u_min) * (v_max - v_min);
    Some(ProjectedBox { source_index, u_min, v_min, u_max, v_max, area })
}

/// Per-pixel loss weights, row-major by rows; background pixels are exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
}

impl ForegroundMask {
    pub fn uniform(width: usize, height: usize) -> Self {
        ForegroundMask { width, height, weights: vec![1.0; width * height] }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.weights[v * self.width + u]
    }
}

/// A pixel is covered when its center lies in the half-open hull
/// `[u_min, u_max) x [v_min, v_max)`; the smallest covering area wins.
pub fn build_mask(projected: &[ProjectedBox], latent_size: (usize, usize)) -> ForegroundMask {
    let (uw, vh) = latent_size;
    let total = (uw * vh) as f64;
    let mut mask = ForegroundMask::uniform(uw, vh);
    for v in 0..vh {
        for u in 0..uw {
            let (ucf, vcf) = (u as f64 + 0.5, v as f64 + 0.5);
            let mut min_area = f64::INFINITY;
            for p in projected {
                if ucf >= p.u_min && ucf < p.u_max && vcf >= p.v_min && vcf < p.v_max {
                    min_area = min_area.min(p.area);
                }
            }
            if min_area.is_finite() {
                mask.weights[v * uw + u] = 2.0 - min_area / total;
            }
        }
    }
    mask
}

/// Project every box of a scene camera and rasterize the weight mask.
pub fn scene_mask(
    boxes: &[BoundingBox3D],
    camera: &Camera,
    latent_size: (usize, usize),
) -> ForegroundMask {
    let projected: Vec<ProjectedBox> = boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| project_box(b, i, camera, latent_size))
        .collect();
    build_mask(&projected, latent_size)
}

/// Mean over all elements of the per-element squared error, weighted by the
/// mask broadcast across channels. `eps_*` are `[C, V, U]`.
pub fn masked_mse<S: Scalar>(
    cx: &mut Ctx<S>,
    eps_true: NodeId,
    eps_pred: NodeId,
    mask: &ForegroundMask,
) -> Result<NodeId> {
    let shape = cx.g.value(eps_pred).shape().to_vec();
    if cx.g.value(eps_true).shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "masked_mse",
            detail: format!("{:?} vs {:?}", cx.g.value(eps_true).shape(), shape),
        });
    }
    if shape.len() != 3 || shape[1] != mask.height || shape[2] != mask.width {
        return Err(Error::ShapeMismatch {
            op: "masked_mse",
            detail: format!("eps {:?} vs mask {}x{}", shape, mask.width, mask.height),
        });
    }
    let m = Tensor::from_f64_slice(&[1, mask.height, mask.width], &mask.weights)?;
    let m = cx.g.constant(m);
    let mb = cx.g.broadcast(m, &shape)?;
    let diff = cx.g.sub(eps_pred, eps_true)?;
    let sq = cx.g.mul(diff, diff)?;
    let weighted = cx.g.mul(sq, mb)?;
    cx.g.mean(weighted, None)
}
