//! Scene file format (JSON with base64-packed voxel labels).

use super::geom::{Mat3, Vec3};
use super::types::*;
use crate::error::{Error, Result};
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub version: u32,
    pub seed: u64,
    pub dims: (usize, usize, usize),
    pub origin: [f64; 3],
    pub voxel_size: f64,
    /// Base64 of the u8 label buffer, index (i·W + j)·D + k.
    pub labels_b64: String,
    pub taxonomy: TaxonomyFile,
    pub boxes: Vec<BoxFile>,
    pub map: Vec<MapElementFile>,
    pub cameras: Vec<CameraFile>,
    pub prompt_tokens: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyFile {
    pub names: Vec<String>,
    pub foreground: Vec<u8>,
    pub background: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxFile {
    pub category: u8,
    pub corners: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapElementFile {
    pub category: String,
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    /// Row-major 3x3.
    pub intrinsics: Vec<f64>,
    pub rotation: Vec<f64>,
    pub translation: [f64; 3],
    pub image_size: (usize, usize),
}

fn mat3_of(v: &[f64], field: &str) -> Result<Mat3> {
    let arr: [f64; 9] = v
        .try_into()
        .map_err(|_| Error::InvalidScene(format!("{field}: expected 9 values, got {}", v.len())))?;
    Ok(Mat3(arr))
}

impl SceneFile {
    pub fn from_scene(scene: &Scene) -> Self {
        SceneFile {
            version: SCENE_FORMAT_VERSION,
            seed: scene.seed,
            dims: scene.grid.dims,
            origin: scene.grid.origin.0,
            voxel_size: scene.grid.voxel_size,
            labels_b64: base64::engine::general_purpose::STANDARD.encode(&scene.grid.labels),
            taxonomy: TaxonomyFile {
                names: scene.taxonomy.names.clone(),
                foreground: scene.taxonomy.foreground.clone(),
                background: scene.taxonomy.background.clone(),
            },
            boxes: scene
                .boxes
                .iter()
                .map(|b| BoxFile {
                    category: b.category,
                    corners: b.corners.iter().map(|c| c.0).collect(),
                })
                .collect(),
            map: scene
                .map
                .iter()
                .map(|m| MapElementFile {
                    category: m.category.name().to_string(),
                    points: m.points.iter().map(|p| p.0).collect(),
                })
                .collect(),
            cameras: scene
                .cameras
                .iter()
                .map(|c| CameraFile {
                    intrinsics: c.intrinsics.0.to_vec(),
                    rotation: c.rotation.0.to_vec(),
                    translation: c.translation.0,
                    image_size: c.image_size,
                })
                .collect(),
            prompt_tokens: scene.prompt.clone(),
        }
    }

    pub fn into_scene(self) -> Result<Scene> {
        if self.version != SCENE_FORMAT_VERSION {
            return Err(Error::InvalidScene(format!("unsupported scene version {}", self.version)));
        }
        let labels = base64::engine::general_purpose::STANDARD
            .decode(&self.labels_b64)
            .map_err(|e| Error::InvalidScene(format!("labels_b64: {e}")))?;
        let grid = OccupancyGrid {
            dims: self.dims,
            origin: Vec3(self.origin),
            voxel_size: self.voxel_size,
            labels,
        };
        let taxonomy = ClassTaxonomy {
            names: self.taxonomy.names,
            foreground: self.taxonomy.foreground,
            background: self.taxonomy.background,
        };
        let mut boxes = Vec::with_capacity(self.boxes.len());
        for (i, b) in self.boxes.into_iter().enumerate() {
            let corners: Vec<Vec3> = b.corners.iter().map(|&c| Vec3(c)).collect();
            let corners: [Vec3; 8] = corners
                .try_into()
                .map_err(|_| Error::InvalidScene(format!("boxes[{i}]: expected 8 corners")))?;
            boxes.push(BoundingBox3D { category: b.category, corners });
        }
        let mut map = Vec::with_capacity(self.map.len());
        for (i, m) in self.map.into_iter().enumerate() {
            let category = MapClass::from_name(&m.category)
                .map_err(|e| Error::InvalidScene(format!("map[{i}]: {e}")))?;
            let points: Vec<Vec3> = m.points.iter().map(|&p| Vec3(p)).collect();
            let points: [Vec3; 8] = points
                .try_into()
                .map_err(|_| Error::InvalidScene(format!("map[{i}]: expected 8 points")))?;
            map.push(MapPolyline { category, points });
        }
        let mut cameras = Vec::with_capacity(self.cameras.len());
        for (i, c) in self.cameras.into_iter().enumerate() {
            cameras.push(Camera {
                intrinsics: mat3_of(&c.intrinsics, &format!("cameras[{i}].intrinsics"))?,
                rotation: mat3_of(&c.rotation, &format!("cameras[{i}].rotation"))?,
                translation: Vec3(c.translation),
                image_size: c.image_size,
            });
        }
        let scene = Scene {
            grid,
            taxonomy,
            boxes,
            map,
            cameras,
            prompt: self.prompt_tokens,
            seed: self.seed,
        };
        scene.validate()?;
        Ok(scene)
    }
}

pub fn scene_to_json(scene: &Scene) -> Result<String> {
    Ok(serde_json::to_string_pretty(&SceneFile::from_scene(scene))?)
}

pub fn scene_from_json(json: &str) -> Result<Scene> {
    let file: SceneFile = serde_json::from_str(json)?;
    file.into_scene()
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    std::fs::write(path, scene_to_json(scene)?)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MalformedInput { path: path.display().to_string(), detail: e.to_string() })?;
    scene_from_json(&text).map_err(|e| Error::MalformedInput {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::gen::{generate_scene, GeneratorSpec};

    #[test]
    fn round_trip_is_exact() {
        let scene = generate_scene(42, &GeneratorSpec::default()).unwrap();
        let json = scene_to_json(&scene).unwrap();
        let back = scene_from_json(&json).unwrap();
        assert_eq!(scene, back);
        // Serialization is byte-deterministic.
        assert_eq!(json, scene_to_json(&back).unwrap());
    }

    #[test]
    fn unknown_fields_rejected() {
        let scene = generate_scene(1, &GeneratorSpec::default()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&scene_to_json(&scene).unwrap()).unwrap();
        v.as_object_mut().unwrap().insert("bogus".into(), 1.into());
        assert!(scene_from_json(&v.to_string()).is_err());
    }

    #[test]
    fn bad_corner_count_diagnosed() {
        let scene = generate_scene(2, &GeneratorSpec { vehicles: (1, 1), ..Default::default() }).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&scene_to_json(&scene).unwrap()).unwrap();
        let corners = v["boxes"][0]["corners"].as_array_mut().unwrap();
        corners.pop();
        let err = scene_from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("boxes[0]"), "{err}");
    }
}
