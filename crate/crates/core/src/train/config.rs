//! Training configuration: every knob of the objective, optimizers, model,
//! and data plumbing, loadable from a JSON file with field-level defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default class terms for the five-class phantom anatomy.
pub fn default_class_terms() -> Vec<String> {
    [
        "background tissue",
        "primary organ",
        "inner structure",
        "lateral structure",
        "peripheral nodule",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // Objective weights. The total is seg + lambda_adv*adv +
    // lambda_vlcol*vlcol + lambda_proto*proto; zero-weight terms are skipped
    // entirely so a source-only run never touches the target branch.
    pub lambda_adv: f64,
    pub lambda_vlcol: f64,
    pub lambda_proto: f64,
    /// EMA decay of the class feature memory (weight on the old value).
    pub memory_decay: f64,
    /// Prototype EMA coefficient; by default the literal convention keeps
    /// `prototype_momentum` weight on the old value.
    pub prototype_momentum: f64,
    /// Flip the prototype EMA convention so the old value keeps
    /// `1 - prototype_momentum` weight instead.
    pub swap_momentum: bool,
    /// Weight of the auxiliary discriminator branch inside the generator's
    /// adversarial term.
    pub adv_aux_weight: f64,
    /// Optional supervised weight on the upsampled auxiliary classifier.
    pub aux_seg_weight: f64,

    // Optimization.
    pub batch_size: usize,
    pub iterations: usize,
    pub sgd_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,

    // Model.
    pub backbone: String,
    pub output_stride: usize,
    pub num_classes: usize,
    /// Raw text-embedding width fed to the projection layer.
    pub text_dim: usize,

    // Text prompts. Stub embeddings are derived from these unless an
    // embedding bank directory is given per domain.
    pub dataset_name: String,
    pub class_terms: Vec<String>,
    pub text_seed: u64,
    pub text_bank_source: Option<String>,
    pub text_bank_target: Option<String>,

    // Data.
    pub source_data: String,
    pub target_data: String,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub augment: bool,

    // Run control.
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub out_dir: String,

    // Accepted for config compatibility; this method variant does not use
    // them (contrastive temperature and mixing coefficient).
    pub temperature_tau: f64,
    pub mixing_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_adv: 0.003,
            lambda_vlcol: 1.0,
            lambda_proto: 0.1,
            memory_decay: 0.9,
            prototype_momentum: 0.01,
            swap_momentum: false,
            adv_aux_weight: 0.5,
            aux_seg_weight: 0.0,
            batch_size: 4,
            iterations: 1000,
            sgd_lr: 2.5e-4,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            adam_lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            backbone: "resnet101".into(),
            output_stride: 8,
            num_classes: 5,
            text_dim: 64,
            dataset_name: "phantom".into(),
            class_terms: default_class_terms(),
            text_seed: 1,
            text_bank_source: None,
            text_bank_target: None,
            source_data: "data/source".into(),
            target_data: "data/target".into(),
            train_fraction: 0.8,
            split_seed: 42,
            augment: true,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            out_dir: "runs/default".into(),
            temperature_tau: 0.05,
            mixing_alpha: 0.2,
        }
    }
}

/// Environment variables that override the corresponding path fields.
pub const ENV_SOURCE_DATA: &str = "XMODSEG_SOURCE_DATA";
pub const ENV_TARGET_DATA: &str = "XMODSEG_TARGET_DATA";
pub const ENV_OUT_DIR: &str = "XMODSEG_OUT_DIR";

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    /// Apply environment path overrides.
    pub fn with_env_overrides(mut self) -> Self {
        for (var, field) in [
            (ENV_SOURCE_DATA, &mut self.source_data),
            (ENV_TARGET_DATA, &mut self.target_data),
            (ENV_OUT_DIR, &mut self.out_dir),
        ] {
            if let Ok(v) = std::env::var(var) {
                if !v.is_empty() {
                    *field = v;
                }
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_adv", self.lambda_adv),
            ("lambda_vlcol", self.lambda_vlcol),
            ("lambda_proto", self.lambda_proto),
            ("adv_aux_weight", self.adv_aux_weight),
            ("aux_seg_weight", self.aux_seg_weight),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("memory_decay", self.memory_decay),
            ("prototype_momentum", self.prototype_momentum),
            ("train_fraction", self.train_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        for (name, v) in [
            ("sgd_lr", self.sgd_lr),
            ("adam_lr", self.adam_lr),
            ("poly_power", self.poly_power),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::Config("sgd_momentum must lie in [0,1)".into()));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config("batch_size and iterations must be positive".into()));
        }
        if self.output_stride != 8 && self.output_stride != 16 {
            return Err(Error::Config(format!(
                "output_stride must be 8 or 16, got {}",
                self.output_stride
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.text_dim < 8 {
            return Err(Error::Config("text_dim must be at least 8".into()));
        }
        if self.class_terms.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} class terms for {} classes",
                self.class_terms.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Stable content hash of the canonical JSON form, used to tie
    /// checkpoints to the exact configuration that produced them.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}
