//! Converts a trained denoiser to v-prediction and distills it by ×2 then
//! ×5, comparing guided generation time and validity against the teacher.
//!
//! cargo run --release --example distilled_sampler

use std::time::Instant;

use tabcf::classifier::{train_blackbox, train_guidance, BLACKBOX_HIDDEN};
use tabcf::data::{split_and_pool, FittedPreprocessor};
use tabcf::diffusion::{train_denoiser, DenoiserConfig, GuidanceConfig, GuidedExplainer, NoiseSchedule, Sampler};
use tabcf::distillation::{convert_to_v, run_progressive_distillation, DistillConfig};
use tabcf::metrics::one_validity;
use tabcf::synthetic::{two_blobs, BlobConfig};
use tabcf::train::TrainConfig;

fn main() -> tabcf::Result<()> {
    let data = two_blobs(&BlobConfig::default(), 7)?;
    let splits = split_and_pool(&data, 0.2, 50, 7)?;
    let pp = FittedPreprocessor::fit(&splits.train, 1000)?;
    let x = pp.encode(&splits.train.rows)?;
    let layout = pp.layout();
    let labels = &splits.train.labels;
    let train = |epochs| TrainConfig { epochs, batch_size: 256, lr: 1e-3 };

    let blackbox = train_blackbox(&x, labels, &BLACKBOX_HIDDEN, &train(20), &pp.schema().hash(), 1)?;
    let steps = 500;
    let schedule = NoiseSchedule::linear_scaled(steps)?;
    let teacher = train_denoiser(&x, &layout, schedule.clone(), &DenoiserConfig { steps, hidden: vec![128, 128, 128], train: train(60) }, 2)?;
    let guide = train_guidance(&x, labels, &layout, &schedule, &BLACKBOX_HIDDEN, &train(20), 3)?;

    let cfg = DistillConfig { convert_epochs: 30, stage_epochs: 30, ..Default::default() };
    let v = convert_to_v(&teacher, &x, cfg.convert_epochs, cfg.batch_size, cfg.lr, 4)?;
    let plan = cfg.plan(steps)?;
    println!("distillation plan {:?}", plan.step_counts());
    let student = run_progressive_distillation(&v, &plan, &x, cfg.batch_size, cfg.lr, 5)?;

    for (name, sampler) in [("teacher", &teacher as &dyn Sampler), ("student", &student as &dyn Sampler)] {
        let explainer = GuidedExplainer { sampler, guide: &guide, preprocessor: &pp, blackbox: &blackbox, cfg: GuidanceConfig::default() };
        let t0 = Instant::now();
        let batches = explainer.explain_pool(&splits.pool.rows, 0, 11, false)?;
        println!(
            "{name:>8}: {} steps, {:.2}s per query, 1-validity {:.2}",
            sampler.grid_from(steps).len() - 1,
            t0.elapsed().as_secs_f64() / batches.len() as f64,
            one_validity(&batches)?
        );
    }
    Ok(())
}
