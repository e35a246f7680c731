//! The generative core: noise schedule, epsilon-prediction UNet with
//! cross-attention conditioning, dual zero-initialized residual branches,
//! the two-phase trainer and the DDPM/DDIM samplers.

pub mod branch;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod trainer;
pub mod unet;

pub use branch::Branch;
pub use model::{CondValues, DualDiffusionModel, ModelConfig};
pub use sampler::{guided_eps, sample, SampleOptions, SamplerKind};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use trainer::{step_rng, Phase, TrainConfig, Trainer};
pub use unet::{BranchTaps, UNet};
