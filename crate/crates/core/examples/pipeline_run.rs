//! Runs every stage of the file-backed pipeline on a reduced synthetic
//! config and prints the report. A second call reuses finished stages.
//!
//! cargo run --release --example pipeline_run [output-dir]

use std::path::PathBuf;

use tabcf::pipeline::{ExperimentConfig, Pipeline};

fn main() -> tabcf::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tabcf-example"));
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/synthetic.toml");
    let mut cfg = ExperimentConfig::from_file(&config)?;
    cfg.output = out.clone();
    cfg.pool_sizes = vec![50];
    cfg.diffusion.train.epochs = 30;
    cfg.distillation.convert_epochs = 10;
    cfg.distillation.stage_epochs = 10;
    cfg.vcnet.train.epochs = 30;

    let mut p = Pipeline::open(cfg.clone(), false)?;
    p.run_all(&cfg.seeds, &cfg.methods, &cfg.pool_sizes)?;
    println!("{}", std::fs::read_to_string(out.join("report/report.md"))?);
    Ok(())
}
