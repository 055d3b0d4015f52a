//! `profitlab` — the operator entry point. Exit codes: 0 success,
//! 2 training divergence, 3 configuration error, 64 usage error,
//! 1 anything else.

mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{ArgAction, Parser, Subcommand};
use profitlab::Error;

use commands::{
    AnalyzeArgs, Common, EvalArgs, GenArgs, PlotArgs, SweepEpochsArgs, SweepRankArgs,
    SweepThresholdArgs, TrainArgs, VerifyArgs,
};

#[derive(Parser)]
#[command(
    name = "profitlab",
    version,
    about = "Desk-scale laboratory for token-selective supervised fine-tuning"
)]
struct Cli {
    /// Artifact directory (env PROFITLAB_OUT overrides the default "out")
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Override every configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fixed reduction orders for bit-identical reruns
    #[arg(long, global = true, action = ArgAction::Set, default_value_t = true)]
    deterministic: bool,
    /// Worker threads for deterministic-safe kernels (all kernels here are
    /// serial, so values above 1 change nothing)
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic labeled corpus
    GenSynthetic(GenArgs),
    /// Train a model under a configured objective
    Train(TrainArgs),
    /// Score a checkpoint on a sample file
    Eval(EvalArgs),
    /// Train across a ProFit threshold × mode grid
    SweepThreshold(SweepThresholdArgs),
    /// Train across adapter ranks plus a full fine-tuning reference
    SweepRank(SweepRankArgs),
    /// Record per-epoch metric trajectories per objective
    SweepEpochs(SweepEpochsArgs),
    /// Profile target probabilities, estimate densities, and run the
    /// core-vs-trivial two-sample test
    AnalyzeProbs(AnalyzeArgs),
    /// Run the randomized gradient lower-bound certification sweep
    VerifyTheory(VerifyArgs),
    /// Render CSV tables to deterministic SVG charts
    Plot(PlotArgs),
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            return code;
        }
    };
    let common = match Common::resolve(cli.out_dir, cli.seed, cli.deterministic, cli.threads) {
        Ok(common) => common,
        Err(e) => {
            eprintln!("error: {e}");
            return 3;
        }
    };
    let result = match &cli.command {
        Command::GenSynthetic(args) => commands::gen_synthetic_cmd(&common, args),
        Command::Train(args) => commands::train_cmd(&common, args),
        Command::Eval(args) => commands::eval_cmd(&common, args),
        Command::SweepThreshold(args) => commands::sweep_threshold_cmd(&common, args),
        Command::SweepRank(args) => commands::sweep_rank_cmd(&common, args),
        Command::SweepEpochs(args) => commands::sweep_epochs_cmd(&common, args),
        Command::AnalyzeProbs(args) => commands::analyze_probs_cmd(&common, args),
        Command::VerifyTheory(args) => commands::verify_theory_cmd(&common, args),
        Command::Plot(args) => commands::plot_cmd(&common, args),
    };
    match result {
        Ok(()) => 0,
        Err(e @ Error::Diverged { .. }) => {
            eprintln!("error: {e}");
            2
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            3
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
