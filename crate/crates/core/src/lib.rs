//! Desk-scale human-to-robot video translation.
//!
//! The crate bundles everything needed to run the full loop on a laptop CPU:
//! a procedural world simulator that emits exactly paired human/robot clips,
//! a lossless patch codec between pixel space and token space, DDPM-style
//! noise-schedule algebra, an in-context diffusion transformer that denoises
//! robot tokens while attending to clean human condition tokens, a trainer
//! with checkpointing, and quantitative evaluation (PSNR/SSIM/MSE, a Fréchet
//! feature distance, automated task success, embodiment consistency).

pub mod cli;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod trainer;
pub mod video;
pub mod worldsim;

pub use model::{ModelConfig, ModelParams, TokenBatch};
pub use schedule::{NoiseSchedule, SigmaMode};
pub use video::{LatentSeq, TokenLayout, TokenPos, VideoClip};
