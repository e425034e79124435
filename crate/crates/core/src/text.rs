//! Modality-specific class prompts, class-level text embeddings, and their
//! learnable projection into the fusion space.
//!
//! Embeddings produced by an offline language model are ingested from files;
//! a seeded stub stands in for them in tests and synthetic experiments.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::ParamStore;
use crate::types::Modality;

/// Width of the fusion space the class embeddings are projected into.
pub const FUSION_DIM: usize = 256;

/// Describes one modality's prompt set. Index 0 is the background term;
/// the index order matches label integers everywhere in the system.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptSpec {
    pub dataset_name: String,
    pub modality: Modality,
    pub class_terms: Vec<String>,
}

impl PromptSpec {
    pub fn new(dataset_name: &str, modality: Modality, class_terms: &[&str]) -> Self {
        Self {
            dataset_name: dataset_name.to_string(),
            modality,
            class_terms: class_terms.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// One prompt string per class, in label order.
pub fn build_prompts(spec: &PromptSpec) -> Result<Vec<String>> {
    if spec.class_terms.is_empty() {
        return Err(Error::Config("prompt spec has no class terms".into()));
    }
    Ok(spec
        .class_terms
        .iter()
        .map(|term| {
            format!(
                "A {} {} imaging of a {}",
                spec.dataset_name,
                spec.modality.as_prompt_token(),
                term
            )
        })
        .collect())
}

/// Per-modality class embedding matrix, C×d, one row per class.
#[derive(Clone, Debug)]
pub struct TextEmbeddingBank {
    pub modality: Modality,
    pub classes: Vec<String>,
    dim: usize,
    rows: Vec<f32>,
}

impl TextEmbeddingBank {
    pub fn from_rows(
        modality: Modality,
        classes: Vec<String>,
        dim: usize,
        rows: Vec<f32>,
    ) -> Result<Self> {
        if rows.len() != classes.len() * dim {
            return Err(Error::Shape(format!(
                "embedding rows hold {} values, expected {}x{}",
                rows.len(),
                classes.len(),
                dim
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("embedding bank contains non-finite values".into()));
        }
        Ok(Self {
            modality,
            classes,
            dim,
            rows,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn row(&self, c: usize) -> &[f32] {
        &self.rows[c * self.dim..(c + 1) * self.dim]
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_vec(self.rows.clone(), (self.num_classes(), self.dim), device)?
                .to_dtype(dtype)?,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct BankManifest {
    modality: Modality,
    classes: Vec<String>,
    dim: usize,
}

/// Writes a bank as `manifest.json` plus a row-major little-endian f32
/// `embeddings.bin` in `dir`.
pub fn save_embedding_bank(dir: &Path, bank: &TextEmbeddingBank) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = BankManifest {
        modality: bank.modality,
        classes: bank.classes.clone(),
        dim: bank.dim,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    let mut file = std::fs::File::create(dir.join("embeddings.bin"))?;
    for v in &bank.rows {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Loads a bank directory, checking the row count against `expected_classes`.
pub fn load_embedding_bank(dir: &Path, expected_classes: usize) -> Result<TextEmbeddingBank> {
    let manifest_path = dir.join("manifest.json");
    let manifest: BankManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path).map_err(|e| Error::Dataset {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?,
    )?;
    if manifest.classes.len() != expected_classes {
        return Err(Error::BankClassMismatch {
            path: PathBuf::from(dir),
            expected: expected_classes,
            found: manifest.classes.len(),
        });
    }
    let bin_path = dir.join("embeddings.bin");
    let mut raw = Vec::new();
    std::fs::File::open(&bin_path)
        .map_err(|e| Error::Dataset {
            path: bin_path.clone(),
            reason: e.to_string(),
        })?
        .read_to_end(&mut raw)?;
    let expected_bytes = manifest.classes.len() * manifest.dim * 4;
    if raw.len() != expected_bytes {
        return Err(Error::Dataset {
            path: bin_path,
            reason: format!("payload is {} bytes, expected {}", raw.len(), expected_bytes),
        });
    }
    let rows: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    TextEmbeddingBank::from_rows(manifest.modality, manifest.classes, manifest.dim, rows)
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic per-prompt unit-norm embeddings; a stand-in for an offline
/// language model. Each row depends only on (prompt, dim, seed).
pub fn stub_embeddings(
    modality: Modality,
    prompts: &[String],
    dim: usize,
    seed: u64,
) -> Result<TextEmbeddingBank> {
    if dim < 8 {
        return Err(Error::Config(format!("stub embedding dim {dim} < 8")));
    }
    let dist = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut rows = Vec::with_capacity(prompts.len() * dim);
    for prompt in prompts {
        let row_seed = fnv1a(prompt.as_bytes(), fnv1a(&seed.to_le_bytes(), 0xcbf29ce484222325));
        let mut rng = ChaCha8Rng::seed_from_u64(row_seed);
        let mut row: Vec<f64> = (0..dim).map(|_| dist.sample(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
        rows.extend(row.iter().map(|&v| v as f32));
    }
    TextEmbeddingBank::from_rows(modality, prompts.to_vec(), dim, rows)
}

/// Learnable affine map from embedding width d to the 256-wide fusion space.
pub struct TextProjection {
    linear: Linear,
    input_dim: usize,
}

impl TextProjection {
    pub fn new(ps: &mut ParamStore, input_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(ps, "text_proj", input_dim, FUSION_DIM, rng)?,
            input_dim,
        })
    }

    /// Projects a C×d bank tensor to the C×256 class-text matrix `t_class`.
    pub fn forward(&self, bank: &Tensor) -> Result<Tensor> {
        let dims = bank.dims();
        if dims.len() != 2 || dims[1] != self.input_dim {
            return Err(Error::Shape(format!(
                "bank is {dims:?}, projection expects (C, {})",
                self.input_dim
            )));
        }
        self.linear.forward(bank)
    }
}
