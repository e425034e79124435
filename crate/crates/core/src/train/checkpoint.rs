//! Checkpoint persistence: a directory holding one safetensors file with
//! every tensor-valued piece of training state plus a JSON header tying the
//! weights to the architecture and configuration that produced them.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSORS_FILE: &str = "state.safetensors";
pub const HEADER_FILE: &str = "header.json";
pub const SCHEMA_VERSION: u32 = 1;

/// Tensor-name prefixes inside the checkpoint file.
pub mod keys {
    pub const GENERATOR: &str = "gen.";
    pub const DISCRIMINATOR: &str = "disc.";
    pub const SGD: &str = "opt.sgd.";
    pub const ADAM_GEN: &str = "opt.adam_gen.";
    pub const ADAM_DISC: &str = "opt.adam_disc.";
    pub const MEMORY_ROWS: &str = "mem.rows";
    pub const PROTO_SOURCE: &str = "proto.source";
    pub const PROTO_TARGET: &str = "proto.target";
    pub const BANK_SOURCE: &str = "bank.source";
    pub const BANK_TARGET: &str = "bank.target";
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema: u32,
    pub iteration: usize,
    pub backbone: String,
    pub output_stride: usize,
    pub num_classes: usize,
    pub text_dim: usize,
    pub config_digest: String,
    pub adam_gen_steps: usize,
    pub adam_disc_steps: usize,
    pub memory_flags: Vec<bool>,
    pub proto_source_flags: Vec<bool>,
    pub proto_target_flags: Vec<bool>,
    pub best_dice: Option<f64>,
    pub source_modality: String,
    pub target_modality: String,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Tensors under a prefix, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(name, t)| {
                name.strip_prefix(prefix).map(|s| (s.to_string(), t.clone()))
            })
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }
}

pub fn save_checkpoint(
    dir: &Path,
    header: &CheckpointHeader,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let map: std::collections::HashMap<String, Tensor> =
        tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    candle_core::safetensors::save(&map, dir.join(TENSORS_FILE))?;
    let text = serde_json::to_string_pretty(header)?;
    std::fs::write(dir.join(HEADER_FILE), text)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, device: &Device) -> Result<Checkpoint> {
    let header_path = dir.join(HEADER_FILE);
    let text = std::fs::read_to_string(&header_path).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {e}", header_path.display()))
    })?;
    let header: CheckpointHeader = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
    if header.schema != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema {} unsupported (expected {SCHEMA_VERSION})",
            header.schema
        )));
    }
    let tensors_path = dir.join(TENSORS_FILE);
    let loaded = candle_core::safetensors::load(&tensors_path, device)
        .map_err(|e| Error::Checkpoint(format!("cannot load {}: {e}", tensors_path.display())))?;
    Ok(Checkpoint {
        header,
        tensors: loaded.into_iter().collect(),
    })
}
