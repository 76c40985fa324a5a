//! Trains a black box and a tabular diffusion model on the two-blob data,
//! then asks for benign counterfactuals of a few attack rows.
//!
//! cargo run --release --example guided_counterfactuals

use tabcf::classifier::{train_blackbox, train_guidance, BLACKBOX_HIDDEN};
use tabcf::data::{split_and_pool, FittedPreprocessor};
use tabcf::diffusion::{train_denoiser, DenoiserConfig, GuidanceConfig, GuidedExplainer, NoiseSchedule};
use tabcf::metrics::one_validity;
use tabcf::synthetic::{two_blobs, BlobConfig};
use tabcf::train::TrainConfig;

fn main() -> tabcf::Result<()> {
    let data = two_blobs(&BlobConfig::default(), 7)?;
    let splits = split_and_pool(&data, 0.2, 20, 7)?;
    let pp = FittedPreprocessor::fit(&splits.train, 1000)?;
    let x = pp.encode(&splits.train.rows)?;
    let layout = pp.layout();
    let labels = &splits.train.labels;

    let train = |epochs| TrainConfig { epochs, batch_size: 256, lr: 1e-3 };
    let blackbox = train_blackbox(&x, labels, &BLACKBOX_HIDDEN, &train(20), &pp.schema().hash(), 1)?;
    println!("black box test {:?}", blackbox.evaluate(&pp.encode(&splits.test.rows)?, &splits.test.labels)?);

    let steps = 200;
    let schedule = NoiseSchedule::linear_scaled(steps)?;
    let denoiser = train_denoiser(
        &x,
        &layout,
        schedule.clone(),
        &DenoiserConfig { steps, hidden: vec![128, 128], train: train(40) },
        2,
    )?;
    let guide = train_guidance(&x, labels, &layout, &schedule, &BLACKBOX_HIDDEN, &train(20), 3)?;

    let explainer = GuidedExplainer {
        sampler: &denoiser,
        guide: &guide,
        preprocessor: &pp,
        blackbox: &blackbox,
        cfg: GuidanceConfig { k: 5, ..Default::default() },
    };
    let batches = explainer.explain_pool(&splits.pool.rows, 0, 11, true)?;
    let names = pp.schema().names().join(", ");
    for b in batches.iter().take(3) {
        println!("\nquery {}  [{names}]", b.query_id);
        println!("  original  {:.2?}", b.query);
        for r in 0..b.k() {
            println!("  cf p={:.3} {:.2?}{}", b.probability[r], b.candidates.row(r), if b.valid[r] { "" } else { "  (invalid)" });
        }
    }
    println!("\n1-validity over {} queries: {:.2}", batches.len(), one_validity(&batches)?);
    Ok(())
}
