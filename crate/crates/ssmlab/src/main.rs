//! Binary front door. Every subcommand takes a JSON run config plus
//! optional flag overrides; see `cli` for the pipelines and exit codes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssmlab::cli::{self, CommandName, Overrides};

#[derive(Parser)]
#[command(
    name = "ssmlab",
    about = "Desk-scale selective SSM with an interpretability toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration (must declare this subcommand)
    config: PathBuf,
    /// Overrides the config's seed (SSMLAB_SEED beats this flag)
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a synthetic task and write a checkpoint
    Train(CommonArgs),
    /// Per-layer entropy / effective-rank metrics and phase classification
    Analyze(CommonArgs),
    /// Variance scan plus per-dimension ablation bins at one layer
    Ablate(CommonArgs),
    /// Grid-searched steering from a SteeringSpec, before/after metrics
    Steer(CommonArgs),
    /// Train a sparse autoencoder on recorded activations
    Sae(CommonArgs),
    /// Emit the averaged implicit-attention matrix and importance vector
    DumpAttention(CommonArgs),
    /// Baseline vs steered comparison table
    Compare(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Cmd::Train(a) => (CommandName::Train, a),
        Cmd::Analyze(a) => (CommandName::Analyze, a),
        Cmd::Ablate(a) => (CommandName::Ablate, a),
        Cmd::Steer(a) => (CommandName::Steer, a),
        Cmd::Sae(a) => (CommandName::Sae, a),
        Cmd::DumpAttention(a) => (CommandName::DumpAttention, a),
        Cmd::Compare(a) => (CommandName::Compare, a),
    };
    let overrides = Overrides {
        seed: args.seed,
        out_dir: args.out_dir.clone(),
    };
    match cli::run(name, &args.config, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ssmlab {name}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
