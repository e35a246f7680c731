//! Voxel-conditioned dual-branch diffusion on synthetic driving scenes.
//!
//! The crate is a self-contained stack: a dense-tensor reverse-mode autodiff
//! substrate, a procedural scene generator with a reference rasterizer,
//! occupancy ray sampling, numerical scene encoders, a three-stage fusion
//! attention block, a foreground-weighted denoising loss, and a dual-branch
//! conditional diffusion trainer with DDPM/DDIM samplers.

pub mod config;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod fgmask;
pub mod formats;
pub mod fusion;
pub mod nn;
pub mod ors;
pub mod scene;
pub mod tensor;
pub mod verify;

pub mod cli;

pub use error::{Error, Result};
