use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shiftlab::config::ExperimentConfig;
use shiftlab::pipeline::{run_stages, RunOptions, Stage, ALL_STAGES};
use shiftlab::Error;

#[derive(Parser)]
#[command(version, about = "Centroid-indexed residual experts: pipeline from config to report")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Re-run this stage even if its inputs are unchanged (repeatable).
    #[arg(long = "stage-force", value_name = "NAME", global = true)]
    stage_force: Vec<String>,

    /// Worker threads for episode rollouts.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Identify the nominal model from random-excitation ID episodes.
    TrainBaseline,
    /// Collect exploration episodes per cluster and held-out probe episodes.
    Collect,
    /// Fit the window featurizer and PCA embedding.
    FitEncoder,
    /// Compute the ID and shift centroids and routing statistics.
    BuildCentroids,
    /// Mine naive and harder preference pairs.
    MinePairs,
    /// Train residual experts and the fine-tuning ablation.
    TrainExperts,
    /// Paired evaluation of every method on both seed blocks.
    Evaluate,
    /// Fit OOD detectors and score ID rejection and known-vs-novel tasks.
    Detect,
    /// Centroid geometry, KS dimension ranking and shift suitability.
    Diagnose,
    /// Bootstrap summaries and the final CSV and text tables.
    Report,
    /// Every stage in order, skipping those already up to date.
    Run,
}

impl Command {
    fn stages(self) -> Vec<Stage> {
        match self {
            Command::TrainBaseline => vec![Stage::TrainBaseline],
            Command::Collect => vec![Stage::Collect],
            Command::FitEncoder => vec![Stage::FitEncoder],
            Command::BuildCentroids => vec![Stage::BuildCentroids],
            Command::MinePairs => vec![Stage::MinePairs],
            Command::TrainExperts => vec![Stage::TrainExperts],
            Command::Evaluate => vec![Stage::Evaluate],
            Command::Detect => vec![Stage::Detect],
            Command::Diagnose => vec![Stage::Diagnose],
            Command::Report => vec![Stage::Report],
            Command::Run => ALL_STAGES.to_vec(),
        }
    }
}

fn load_config(cli: &Cli) -> shiftlab::Result<(ExperimentConfig, RunOptions)> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    let force = cli.stage_force.iter().map(|s| s.parse()).collect::<shiftlab::Result<Vec<Stage>>>()?;
    Ok((cfg, RunOptions { jobs: cli.jobs, force }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (cfg, opts) = match load_config(&cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_stages(&cfg, &cli.command.stages(), &opts) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
