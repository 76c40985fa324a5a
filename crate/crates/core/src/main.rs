use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tabcf::pipeline::{ExperimentConfig, Method, Pipeline};

#[derive(Parser)]
#[command(name = "tabcf", about = "Counterfactual explanations and rules for tabular intrusion data")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "configs/synthetic.toml")]
    config: PathBuf,
    /// Run only this seed (default: every configured seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Explain or evaluate only this method.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Explain only this pool size.
    #[arg(long, global = true)]
    pool_size: Option<usize>,
    /// Candidates per query for diffusion methods.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Rerun completed stages and accept a changed config.
    #[arg(long, global = true)]
    force: bool,
    /// Output directory (overrides the config and TABCF_OUTPUT).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Preprocess,
    TrainClassifier,
    TrainDiffusion,
    Distill,
    TrainVcnet,
    Explain,
    Evaluate,
    Rules {
        /// Attack tag to hold out (default from the config).
        #[arg(long)]
        tag: Option<String>,
    },
    Report,
    /// Every stage in order.
    Run,
}

fn run(cli: Cli) -> tabcf::Result<()> {
    let mut cfg = ExperimentConfig::from_file(&cli.config)?;
    if let Some(o) = cli.output {
        cfg.output = o;
    }
    if let Some(k) = cli.k {
        cfg.guidance.k = k;
    }
    let method = cli.method.as_deref().map(str::parse::<Method>).transpose()?;
    if let Some(n) = cli.pool_size {
        if n > cfg.max_pool_size {
            return Err(tabcf::Error::Config(format!("pool size {n} exceeds max_pool_size {}", cfg.max_pool_size)));
        }
    }
    let seeds = cli.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    let methods = method.map_or_else(|| cfg.methods.clone(), |m| vec![m]);
    let pools = cli.pool_size.map_or_else(|| cfg.pool_sizes.clone(), |n| vec![n]);
    let mut p = Pipeline::open(cfg, cli.force)?;
    for &seed in &seeds {
        match cli.command {
            Command::Preprocess => {
                p.preprocess(seed)?;
            }
            Command::TrainClassifier => {
                p.train_classifier(seed)?;
            }
            Command::TrainDiffusion => {
                p.train_diffusion(seed)?;
            }
            Command::Distill => {
                p.distill(seed)?;
            }
            Command::TrainVcnet => {
                p.train_vcnet(seed)?;
            }
            Command::Explain => {
                for &m in &methods {
                    for &n in &pools {
                        p.explain(seed, m, n)?;
                    }
                }
            }
            _ => break,
        }
    }
    match cli.command {
        Command::Evaluate => {
            p.evaluate()?;
        }
        Command::Rules { ref tag } => {
            p.rules(tag.as_deref(), seeds[0])?;
        }
        Command::Report => {
            p.report()?;
        }
        Command::Run => p.run_all(&seeds, &methods, &pools)?,
        _ => {}
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
