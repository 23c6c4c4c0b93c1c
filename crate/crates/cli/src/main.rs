//! `rvit` — command-line driver for the transfer-attack laboratory.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rvit_core::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "rvit", version, about = "Toy ViT transfer-attack laboratory", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it as an image batch.
    GenData(CommonArgs),
    /// Train the surrogate and the four victims; write checkpoints.
    TrainZoo(CommonArgs),
    /// Attack test images with the configured method; write the batch.
    Attack(CommonArgs),
    /// Evaluate an adversarial batch against every victim.
    Evaluate(EvaluateArgs),
    /// Run the structural redundancy probes on the surrogate.
    Probe(CommonArgs),
    /// Train global robustification tokens on a calibration slice.
    Robustify(CommonArgs),
    /// Verify analytic gradients against central differences.
    Gradcheck(CommonArgs),
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Adversarial batch to evaluate; defaults to the attack output path.
    #[arg(long)]
    batch: Option<PathBuf>,
}

fn load_config(args: &CommonArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(args) => commands::gen_data(&load_config(&args)?),
        Command::TrainZoo(args) => commands::train_zoo(&load_config(&args)?),
        Command::Attack(args) => commands::attack(&load_config(&args)?),
        Command::Evaluate(args) => {
            commands::evaluate(&load_config(&args.common)?, args.batch.as_deref())
        }
        Command::Probe(args) => commands::probe(&load_config(&args)?),
        Command::Robustify(args) => commands::robustify(&load_config(&args)?),
        Command::Gradcheck(args) => commands::gradcheck(&load_config(&args)?),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}
