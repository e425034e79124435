//! Experiment drivers shared by the command-line tools and the test suite:
//! single training runs summarized by their final evaluation, the four-term
//! ablation grid, and seed sweeps.

use crate::data::PhantomConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::train::config::TrainConfig;
use crate::train::trainer::{LossRecord, TrainData, Trainer};

/// Final metrics of one training run.
pub struct RunSummary {
    pub seed: u64,
    /// Mean foreground Dice (%) on the held-out source split.
    pub source_test_dice: f64,
    /// Mean foreground Dice (%) on the held-out target split.
    pub target_test_dice: f64,
    pub target_report: EvalReport,
}

/// Trains `base` with the given seed and evaluates both test splits.
/// Experiment runs keep everything in memory and write no artifacts.
pub fn run_once(
    base: &TrainConfig,
    data: &TrainData,
    seed: u64,
    mut on_record: impl FnMut(&LossRecord) -> Result<()>,
) -> Result<RunSummary> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.checkpoint_every = 0;
    cfg.eval_every = 0;
    let mut trainer = Trainer::new(cfg, data.source_train.modality, data.target_train.modality)?;
    let out = trainer.run(data, |r| on_record(r))?;
    let source = trainer.evaluate(&data.source_test)?;
    let target = match out.final_eval {
        Some(report) => report,
        None => trainer.evaluate(&data.target_test)?,
    };
    Ok(RunSummary {
        seed,
        source_test_dice: source.mean_foreground_dice,
        target_test_dice: target.mean_foreground_dice,
        target_report: target,
    })
}

/// `base` with every unsupervised weight disabled: supervised training on
/// the source domain only.
pub fn source_only_config(base: &TrainConfig) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.lambda_adv = 0.0;
    cfg.lambda_vlcol = 0.0;
    cfg.lambda_proto = 0.0;
    cfg
}

/// The ablation grid, weakest configuration first: adversarial alignment
/// alone, then adding prototypes, then the covariance loss, then all terms.
/// Weights come from `base` so a tuned configuration ablates itself.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut adv = base.clone();
    adv.lambda_vlcol = 0.0;
    adv.lambda_proto = 0.0;
    let mut adv_proto = base.clone();
    adv_proto.lambda_vlcol = 0.0;
    let mut adv_vlcol = base.clone();
    adv_vlcol.lambda_proto = 0.0;
    vec![
        ("seg+adv".to_string(), adv),
        ("seg+adv+proto".to_string(), adv_proto),
        ("seg+adv+vlcol".to_string(), adv_vlcol),
        ("all".to_string(), base.clone()),
    ]
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

/// One ablation table row: the per-seed target Dice scores and their
/// aggregate.
pub struct AblationRow {
    pub name: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std_dev: f64,
}

/// Runs every ablation variant over every seed. `progress` observes each
/// finished run.
pub fn run_ablation(
    base: &TrainConfig,
    data: &TrainData,
    seeds: &[u64],
    mut progress: impl FnMut(&str, &RunSummary),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(base) {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let summary = run_once(&cfg, data, seed, |_| Ok(()))?;
            progress(&name, &summary);
            per_seed.push(summary.target_test_dice);
        }
        let (mean, std_dev) = mean_std(&per_seed);
        rows.push(AblationRow {
            name,
            per_seed,
            mean,
            std_dev,
        });
    }
    Ok(rows)
}

/// Whether a weakest-first sequence of mean scores is non-degrading, with
/// ties tolerated up to `tie_tolerance` Dice points.
pub fn ordering_ok(means: &[f64], tie_tolerance: f64) -> bool {
    means.windows(2).all(|w| w[1] >= w[0] - tie_tolerance)
}

/// Plain-text ablation table with one row per variant.
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>12} {:>8} {}\n",
        "variant", "mean dice %", "std", "per-seed"
    ));
    for row in rows {
        let per_seed = row
            .per_seed
            .iter()
            .map(|d| format!("{d:.2}"))
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!(
            "{:<16} {:>12.2} {:>8.2} {}\n",
            row.name, row.mean, row.std_dev, per_seed
        ));
    }
    out
}

/// Phantom and training configuration for one experiment budget.
pub struct ToySetup {
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
}

/// Named budgets for the scaled-down adaptation experiment. `tiny` is the
/// reference budget: 5-class 64×64 phantoms, compact encoder, a CPU-scale
/// iteration count.
pub fn toy_setup(budget: &str) -> Result<ToySetup> {
    let mut phantom = PhantomConfig::default();
    phantom.size = 64;
    phantom.num_classes = 5;
    phantom.subjects_per_domain = 8;
    phantom.slices_per_subject = 4;

    let mut train = TrainConfig::default();
    train.backbone = "tiny".into();
    train.output_stride = 16;
    train.num_classes = 5;
    train.batch_size = 4;
    train.augment = true;

    match budget {
        "tiny" => {
            train.iterations = 300;
        }
        "small" => {
            phantom.subjects_per_domain = 10;
            train.iterations = 600;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown budget `{other}` (expected tiny or small)"
            )));
        }
    }
    Ok(ToySetup { phantom, train })
}
