mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "hpan",
    version,
    about = "Prototype attention for few-shot video object segmentation"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Flat JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Generate synthetic episodes instead of reading one from disk.
    #[arg(long, global = true)]
    synth: bool,
    /// Middle-frame prototypes without graph enhancement or self-attention.
    #[arg(long, global = true)]
    baseline: bool,
    /// Worker threads for episode-level parallelism.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Quick oracle, gradient, pseudo-mask, k-means and metric checks.
    Selftest,
    /// Finite-difference check of every analytic gradient.
    Gradcheck,
    /// Run the pipeline on an episode directory or on synthetic episodes.
    RunEpisode {
        /// Episode directory holding `episode.json`.
        episode: Option<PathBuf>,
    },
    /// Cost and timing sweep over (K, T) and prototype counts.
    Bench,
    /// J and F between two directories of mask files.
    Metrics { pred: PathBuf, gt: PathBuf },
    /// Train on synthetic episodes and write the loss trajectory.
    TrainDemo,
}

fn resolve(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if g.baseline {
        cfg.baseline = true;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = resolve(&cli.global)?;
    if let Some(n) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Selftest => commands::selftest(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::RunEpisode { episode } => {
            if episode.is_some() {
                cfg.episode_dir = episode;
            }
            commands::run_episode(&cfg, cli.global.synth)
        }
        Command::Bench => commands::bench(&cfg),
        Command::Metrics { pred, gt } => commands::metrics(&cfg, &pred, &gt),
        Command::TrainDemo => commands::train_demo(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HPAN_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
