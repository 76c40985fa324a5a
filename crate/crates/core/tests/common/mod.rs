#![allow(dead_code)]

use std::path::Path;

use tabcf::baselines::WachterConfig;
use tabcf::diffusion::DenoiserConfig;
use tabcf::distillation::DistillConfig;
use tabcf::pipeline::{ClassifierConfig, ExperimentConfig, Method};
use tabcf::train::TrainConfig;
use tabcf::vcnet::VcnetConfig;

pub fn train(epochs: usize, batch_size: usize, lr: f64) -> TrainConfig {
    TrainConfig { epochs, batch_size, lr }
}

/// A synthetic experiment small enough to run every stage in seconds.
pub fn tiny_config(output: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        output: output.to_path_buf(),
        seeds: vec![0],
        pool_sizes: vec![10],
        ..Default::default()
    };
    c.data.synthetic.rows = 800;
    c.data.synthetic_seed = 3;
    c.classifier = ClassifierConfig {
        hidden: vec![16, 8],
        train: train(5, 128, 1e-3),
    };
    c.diffusion = DenoiserConfig {
        steps: 20,
        hidden: vec![32, 32],
        train: train(5, 128, 1e-3),
    };
    c.guidance.k = 4;
    c.guide_classifier = ClassifierConfig {
        hidden: vec![16],
        train: train(3, 128, 1e-3),
    };
    c.distillation = DistillConfig {
        factors: vec![2, 5],
        stage_epochs: 2,
        convert_epochs: 2,
        batch_size: 128,
        lr: 5e-4,
    };
    c.vcnet = VcnetConfig {
        hidden: vec![16, 8],
        latent: 4,
        components: 2,
        train: train(3, 128, 1e-3),
        ..Default::default()
    };
    c.wachter = WachterConfig {
        max_outer: 2,
        inner_steps: 10,
        ..Default::default()
    };
    c.metrics.lof_k = 5;
    c.rules.attack_tag = Some("stealth".into());
    c.rules.method = Method::Vcnet;
    c
}
