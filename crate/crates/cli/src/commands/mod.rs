//! Subcommand implementations.

pub mod ablate;
pub mod eval;
pub mod gradcam;
pub mod seed_sweep;
pub mod synth_data;
pub mod train;

use anyhow::Context;
use std::path::Path;
use xmodseg_core::train::TrainConfig;

/// Load a training configuration file and apply environment path overrides.
pub(crate) fn load_config(path: &Path) -> anyhow::Result<TrainConfig> {
    let cfg = TrainConfig::from_file(path)
        .with_context(|| format!("loading config `{}`", path.display()))?;
    Ok(cfg.with_env_overrides())
}
