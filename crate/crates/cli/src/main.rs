//! `xmodseg`: train, evaluate, and analyze the cross-modality segmentation
//! pipeline. Exit code 1 signals configuration or data errors, 2 signals
//! command-line usage errors.

mod commands;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "xmodseg",
    version,
    about = "Text-guided cross-modality segmentation: training, evaluation, and analysis tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired synthetic dataset with a cross-modality intensity shift
    SynthData(commands::synth_data::Args),
    /// Train the segmentation network from a JSON configuration file
    Train(commands::train::Args),
    /// Evaluate a checkpoint on a labeled dataset and print per-class metrics
    Eval(commands::eval::Args),
    /// Write class-attribution heatmap overlays as PNG files
    Gradcam(commands::gradcam::Args),
    /// Run the objective-term ablation grid and print a comparison table
    Ablate(commands::ablate::Args),
    /// Repeat training over several seeds and report mean and spread
    SeedSweep(commands::seed_sweep::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(args) => commands::synth_data::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Gradcam(args) => commands::gradcam::run(args),
        Command::Ablate(args) => commands::ablate::run(args),
        Command::SeedSweep(args) => commands::seed_sweep::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
