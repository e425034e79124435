//! `ablate`: train the four-term ablation grid on generated phantoms and
//! print a comparison table, asserting the expected ordering.

use std::fs;
use std::path::PathBuf;

use anyhow::bail;
use xmodseg_core::data::generate_phantoms;
use xmodseg_core::train::{
    ordering_ok, render_ablation_table, run_ablation, toy_setup, TrainData,
};

#[derive(clap::Args)]
pub struct Args {
    /// Experiment budget: tiny or small
    #[arg(long, default_value = "tiny")]
    pub budget: String,
    /// Number of seeds averaged per variant
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// First seed; runs use consecutive seeds from here
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Override the per-run iteration count
    #[arg(long)]
    pub iters: Option<usize>,
    /// Tie tolerance in Dice points for the ordering assertion
    #[arg(long, default_value_t = 1.0)]
    pub tie_tolerance: f64,
    /// Write the table and per-run scores into this directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let mut setup = toy_setup(&args.budget)?;
    if let Some(iters) = args.iters {
        setup.train.iterations = iters;
    }
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }

    println!(
        "budget {}: {} iterations per run, {} seeds per variant",
        args.budget, setup.train.iterations, args.seeds
    );
    let (source, target) = generate_phantoms(&setup.phantom)?;
    let data = TrainData::from_datasets(
        &source,
        &target,
        setup.train.train_fraction,
        setup.train.split_seed,
    )?;

    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| args.first_seed + i).collect();
    let rows = run_ablation(&setup.train, &data, &seeds, |name, summary| {
        println!(
            "  {name:<16} seed {}: target dice {:.2}%",
            summary.seed, summary.target_test_dice
        );
    })?;

    let table = render_ablation_table(&rows);
    print!("{table}");

    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.txt"), &table)?;
        let json = serde_json::to_string_pretty(
            &rows
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "variant": r.name,
                        "per_seed_dice": r.per_seed,
                        "mean_dice": r.mean,
                        "std_dice": r.std_dev,
                    })
                })
                .collect::<Vec<_>>(),
        )?;
        fs::write(dir.join("ablation.json"), json)?;
        println!("reports under {}", dir.display());
    }

    let means: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    if !ordering_ok(&means, args.tie_tolerance) {
        bail!(
            "ablation ordering violated: means {:?} must be non-degrading within {} dice points",
            means,
            args.tie_tolerance
        );
    }
    println!(
        "ordering check passed (ties tolerated within {} dice points)",
        args.tie_tolerance
    );
    Ok(())
}
