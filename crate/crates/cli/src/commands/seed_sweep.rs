//! `seed-sweep`: repeat the configured training run over consecutive seeds
//! and report the mean and spread of the final target Dice.

use std::fs;
use std::path::PathBuf;

use anyhow::bail;
use xmodseg_core::train::{mean_std, run_once, TrainData};

#[derive(clap::Args)]
pub struct Args {
    /// Training configuration file (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Number of consecutive seeds to run
    #[arg(long, default_value_t = 3)]
    pub count: usize,
    /// First seed of the sweep
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Write per-seed results as JSON to this path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    if args.count == 0 {
        bail!("--count must be at least 1");
    }
    let cfg = super::load_config(&args.config)?;
    let data = TrainData::load(&cfg)?;

    let mut target = Vec::with_capacity(args.count);
    let mut source = Vec::with_capacity(args.count);
    for i in 0..args.count as u64 {
        let seed = args.first_seed + i;
        let summary = run_once(&cfg, &data, seed, |_| Ok(()))?;
        println!(
            "seed {seed}: target dice {:.2}%, source dice {:.2}%",
            summary.target_test_dice, summary.source_test_dice
        );
        target.push(summary.target_test_dice);
        source.push(summary.source_test_dice);
    }

    let (t_mean, t_std) = mean_std(&target);
    let (s_mean, s_std) = mean_std(&source);
    println!("target dice over {} seeds: {t_mean:.2} ± {t_std:.2} %", args.count);
    println!("source dice over {} seeds: {s_mean:.2} ± {s_std:.2} %", args.count);

    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&serde_json::json!({
            "first_seed": args.first_seed,
            "count": args.count,
            "target_dice": target,
            "source_dice": source,
            "target_mean": t_mean,
            "target_std": t_std,
            "source_mean": s_mean,
            "source_std": s_std,
        }))?;
        fs::write(path, json)?;
        println!("json report: {}", path.display());
    }
    Ok(())
}
