//! Semantic driving scenes: domain types, the seeded procedural generator,
//! the scene file format, and the reference rasterizer.

pub mod gen;
pub mod geom;
pub mod json;
pub mod raster;
pub mod types;

pub use gen::{generate_scene, level_camera, GeneratorSpec};
pub use geom::{Mat3, Vec3};
pub use json::{load_scene, save_scene, scene_from_json, scene_to_json, SceneFile};
pub use raster::{rasterize_reference, RasterPlan, PALETTE};
pub use types::*;
