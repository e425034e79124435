//! `eval`: score a checkpoint against a labeled manifest dataset.

use std::fs;
use std::path::PathBuf;

use xmodseg_core::data::load_manifest;
use xmodseg_core::train::Trainer;

#[derive(clap::Args)]
pub struct Args {
    /// Training configuration file (JSON); architecture must match the checkpoint
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint directory to evaluate
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest directory of the labeled dataset to score
    #[arg(long)]
    pub data: PathBuf,
    /// Write the full report as JSON to this path
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write per-subject metrics as CSV to this path
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let cfg = super::load_config(&args.config)?;
    let dataset = load_manifest(&args.data)?;
    let trainer = Trainer::from_checkpoint(cfg, &args.checkpoint)?;
    let report = trainer.evaluate(&dataset)?;

    print!("{}", report.render_table());
    println!(
        "mean foreground dice: {:.2}% over {} subjects",
        report.mean_foreground_dice,
        report.subjects.len()
    );
    match report.mean_foreground_asd {
        Some(asd) => println!("mean foreground asd: {asd:.3} mm"),
        None => println!("mean foreground asd: undefined (a class is empty everywhere)"),
    }

    if let Some(path) = &args.json {
        fs::write(path, report.to_json()?)?;
        println!("json report: {}", path.display());
    }
    if let Some(path) = &args.csv {
        fs::write(path, report.to_csv())?;
        println!("csv report: {}", path.display());
    }
    Ok(())
}
