//! Holds the `stealth` attack cluster out of training, explains its test
//! rows with VCNet, and mines global rules that separate counterfactuals
//! from the attacks.
//!
//! cargo run --release --example zero_day_rules

use tabcf::rules::{zero_day_workflow, ZeroDayConfig};
use tabcf::synthetic::{two_blobs, BlobConfig, ZERO_DAY_TAG};
use tabcf::train::TrainConfig;
use tabcf::vcnet::{train_vcnet, VcnetConfig};

fn main() -> tabcf::Result<()> {
    let data = two_blobs(&BlobConfig::default(), 7)?;
    let cfg = ZeroDayConfig {
        train: TrainConfig { epochs: 20, batch_size: 256, lr: 5e-4 },
        contrast: true,
        ..Default::default()
    };
    let outcome = zero_day_workflow(&data, ZERO_DAY_TAG, &cfg, 0, |stage| {
        let x = stage.preprocessor.encode(&stage.train.rows)?;
        let vcfg = VcnetConfig { train: TrainConfig { epochs: 40, batch_size: 128, lr: 1e-3 }, ..Default::default() };
        let vcnet = train_vcnet(&x, &stage.train.labels, &stage.preprocessor.layout(), &vcfg, stage.seed)?;
        stage
            .queries
            .iter_rows()
            .enumerate()
            .map(|(q, row)| vcnet.generate_cf(stage.preprocessor, stage.blackbox, q, row, 0, stage.seed))
            .collect()
    })?;
    println!("held-out {ZERO_DAY_TAG} rows flagged as attacks: {:.3}", outcome.held_out_accuracy);
    println!("tree with {} splits; rules:\n{}", outcome.tree.split_count(), outcome.rules.to_text());
    println!("filter on test split: {:?}", outcome.rules.filter);
    if let Some(c) = &outcome.contrast {
        println!("rules from random benign rows instead:\n{}{:?}", c.to_text(), c.filter);
    }
    Ok(())
}
