//! Mixed-type denoising diffusion over encoded tabular rows.

pub mod denoiser;
pub mod guided;
pub mod sampler;
pub mod schedule;

pub use denoiser::{train_denoiser, DenoiserConfig, MixedNet, TabularDenoiser};
pub use guided::{cf_loss, GuidanceConfig, GuidedExplainer};
pub use sampler::{reverse_step, sample_from, sample_prior, Sampler};
pub use schedule::NoiseSchedule;
