//! `train`: run the adaptation loop from a config file, streaming a JSONL
//! metric log and saving checkpoints.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use xmodseg_core::train::{TrainData, Trainer};

#[derive(clap::Args)]
pub struct Args {
    /// Training configuration file (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Override the configured iteration count
    #[arg(long)]
    pub iters: Option<usize>,
    /// Override the configured output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resume from this checkpoint directory
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print one progress line every N iterations (0 disables progress output)
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let mut cfg = super::load_config(&args.config)?;
    if let Some(iters) = args.iters {
        cfg.iterations = iters;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;

    let data = TrainData::load(&cfg)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory `{}`", out_dir.display()))?;

    let mut trainer = match &args.resume {
        Some(dir) => Trainer::from_checkpoint(cfg.clone(), dir)?,
        None => Trainer::new(
            cfg.clone(),
            data.source_train.modality,
            data.target_train.modality,
        )?,
    };

    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;

    let log_path = out_dir.join("log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .write(true)
        .open(&log_path)
        .with_context(|| format!("opening log `{}`", log_path.display()))?;

    let log_every = args.log_every;
    let output = trainer.run(&data, |rec| {
        serde_json::to_writer(&mut log, rec)?;
        log.write_all(b"\n")?;
        if log_every > 0 && rec.iteration % log_every == 0 {
            println!(
                "iter {:>6}  total {:.4}  ce {:.4}  dice {:.4}  lr {:.3e}",
                rec.iteration, rec.total, rec.seg_ce, rec.seg_dice, rec.lr_sgd
            );
        }
        Ok(())
    })?;

    let final_dir = out_dir.join("checkpoints").join("final");
    if trainer.cfg().checkpoint_every == 0 {
        trainer.save_checkpoint(&final_dir)?;
    }
    println!("checkpoint: {}", final_dir.display());
    println!("log: {}", log_path.display());

    if let Some(report) = &output.final_eval {
        fs::write(out_dir.join("eval.json"), report.to_json()?)?;
        println!(
            "final target dice: {:.2}% (best seen {:.2}%)",
            report.mean_foreground_dice,
            output.best_dice.unwrap_or(report.mean_foreground_dice)
        );
    } else {
        println!("no labeled target test split; skipped final evaluation");
    }
    Ok(())
}
