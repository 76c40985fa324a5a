pub mod baselines;
pub mod classifier;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod distillation;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod rules;
pub mod synthetic;
pub mod train;
pub mod vcnet;

pub use error::{Error, Result};
