//! Training loop, optimizers, checkpointing, configuration, and attribution
//! probes.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod gradcam;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use config::TrainConfig;
pub use experiment::{
    ablation_variants, mean_std, ordering_ok, render_ablation_table, run_ablation, run_once,
    source_only_config, toy_setup, AblationRow, RunSummary, ToySetup,
};
pub use gradcam::{dilate_mask, gradcam_map, mass_inside, GRADCAM_LAYERS};
pub use optim::{Adam, SgdMomentum};
pub use trainer::{LossRecord, RunOutput, TrainData, Trainer};
