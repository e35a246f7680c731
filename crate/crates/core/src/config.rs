//! Run configuration and dataset manifest.
//!
//! Configs are JSON documents with unknown keys rejected; every omitted key
//! takes its documented default. The config hash is a SHA-256 over the
//! canonicalized (sorted-key, compact) JSON of the loaded document and ties
//! datasets and training state to the configuration that produced them.

use crate::diffusion::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::ors::SamplingPlan;
use crate::scene::gen::GeneratorSpec;
use crate::scene::types::OccupancyGrid;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DtypeChoice {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub samples: Option<usize>,
    pub near: Option<f64>,
    pub far: Option<f64>,
}

impl PlanConfig {
    /// Resolve against a grid: 32 samples from half a voxel to the grid
    /// diagonal unless overridden.
    pub fn resolve(&self, grid: &OccupancyGrid, default_samples: usize) -> Result<SamplingPlan> {
        let n = self.samples.unwrap_or(default_samples);
        let near = self.near.unwrap_or(0.5 * grid.voxel_size);
        let far = self.far.unwrap_or_else(|| grid.diagonal());
        SamplingPlan::new(n, near, far)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/scenes`.
    pub scenes_dir: Option<PathBuf>,
    /// Defaults to `<out_dir>/model.dckp`.
    pub checkpoint: Option<PathBuf>,
    pub dtype: DtypeChoice,
    /// Scene count for dataset generation.
    pub scene_count: usize,
    pub generator: GeneratorSpec,
    pub plan: PlanConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            scenes_dir: None,
            checkpoint: None,
            dtype: DtypeChoice::F32,
            scene_count: 16,
            generator: GeneratorSpec::default(),
            plan: PlanConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn scenes_dir(&self) -> PathBuf {
        self.scenes_dir.clone().unwrap_or_else(|| self.out_dir.join("scenes"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.dckp"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.scenes_dir().join("manifest.json")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        let (u, v) = self.model.latent;
        if u % 4 != 0 || v % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "latent {u}x{v} must be divisible by 4 (two downsampling stages)"
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MalformedInput {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        RunConfig::from_json(&text).map_err(|e| Error::MalformedInput {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        // serde_json maps sort keys; a value round-trip canonicalizes field
        // order independently of struct declaration order.
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&value)?)
    }

    /// Stable digest of the canonicalized config document. Path fields are
    /// normalized out so relocating outputs does not change identity.
    pub fn hash(&self) -> Result<String> {
        let mut normalized = self.clone();
        normalized.out_dir = RunConfig::default().out_dir;
        normalized.scenes_dir = None;
        normalized.checkpoint = None;
        let canonical = normalized.to_canonical_json()?;
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        Ok(hex_string(&hasher.finalize()))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub scene_count: usize,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(format!("manifest {}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedInput {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// Training progress sidecar written next to the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub phase: String,
    pub step: u64,
    pub config_hash: String,
}

impl TrainState {
    pub fn path_for(checkpoint: &Path) -> PathBuf {
        let mut os = checkpoint.as_os_str().to_os_string();
        os.push(".state.json");
        PathBuf::from(os)
    }

    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        std::fs::write(Self::path_for(checkpoint), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(checkpoint: &Path) -> Result<TrainState> {
        let path = Self::path_for(checkpoint);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| Error::MissingArtifact(format!("train state {}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedInput {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
        // Canonicalization is stable across the round trip.
        assert_eq!(cfg.to_canonical_json().unwrap(), back.to_canonical_json().unwrap());
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"bogus_key": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.scenes_dir(), PathBuf::from("out/scenes"));
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("out/model.dckp"));
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn bad_latent_rejected() {
        let cfg = RunConfig::from_json(r#"{"model": {"latent": [30, 30]}}"#);
        assert!(cfg.is_err());
    }

    #[test]
    fn train_state_sidecar_path() {
        let p = TrainState::path_for(Path::new("out/model.dckp"));
        assert_eq!(p, PathBuf::from("out/model.dckp.state.json"));
    }
}
