//! Manifest-driven dataset persistence.
//!
//! On disk a dataset is a directory with a `manifest.json` plus one flat
//! binary per slice payload: little-endian f32 images and u8 labels, either
//! raw or gzip-compressed (detected by magic bytes). The manifest carries
//! the slice geometry so payloads stay header-free.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize_intensities, SliceDataset, SliceRecord, Subject};
use crate::error::{Error, Result};
use crate::types::Modality;

#[derive(Serialize, Deserialize)]
struct ManifestSlice {
    image: String,
    label: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSubject {
    id: String,
    slices: Vec<ManifestSlice>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    modality: Modality,
    spacing: (f64, f64),
    height: usize,
    width: usize,
    num_classes: usize,
    /// Set when payloads are already normalized to [-1, 1]; loading then
    /// skips renormalization so save/load round-trips bitwise.
    #[serde(default)]
    normalized: bool,
    subjects: Vec<ManifestSubject>,
}

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Read a payload file, transparently decompressing gzip (magic 1f 8b).
fn read_payload(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| dataset_err(path, format!("cannot read: {e}")))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| dataset_err(path, format!("gzip decode failed: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_image(path: &Path, pixels: usize) -> Result<Vec<f32>> {
    let bytes = read_payload(path)?;
    if bytes.len() != pixels * 4 {
        return Err(dataset_err(
            path,
            format!("expected {} bytes for {pixels} f32 pixels, found {}", pixels * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_label(path: &Path, pixels: usize, num_classes: usize) -> Result<Vec<u8>> {
    let bytes = read_payload(path)?;
    if bytes.len() != pixels {
        return Err(dataset_err(
            path,
            format!("expected {pixels} bytes for u8 labels, found {}", bytes.len()),
        ));
    }
    if let Some(&bad) = bytes.iter().find(|&&v| (v as usize) >= num_classes) {
        return Err(dataset_err(
            path,
            format!("label value {bad} out of range for {num_classes} classes"),
        ));
    }
    Ok(bytes)
}

/// Load a dataset directory. Intensities are normalized to [-1, 1] unless
/// the manifest declares the payloads already normalized.
pub fn load_manifest(dir: &Path) -> Result<SliceDataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| dataset_err(&manifest_path, format!("cannot read: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| dataset_err(&manifest_path, format!("invalid JSON: {e}")))?;
    if manifest.height == 0 || manifest.width == 0 || manifest.num_classes == 0 {
        return Err(dataset_err(&manifest_path, "height, width, and num_classes must be positive"));
    }
    let pixels = manifest.height * manifest.width;

    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for subject in &manifest.subjects {
        let mut slices = Vec::with_capacity(subject.slices.len());
        for entry in &subject.slices {
            let mut image = read_image(&dir.join(&entry.image), pixels)?;
            if !manifest.normalized {
                normalize_intensities(&mut image);
            }
            let label = entry
                .label
                .as_ref()
                .map(|rel| read_label(&dir.join(rel), pixels, manifest.num_classes))
                .transpose()?;
            slices.push(SliceRecord { image, label });
        }
        subjects.push(Subject {
            id: subject.id.clone(),
            slices,
        });
    }

    let dataset = SliceDataset {
        modality: manifest.modality,
        spacing: manifest.spacing,
        height: manifest.height,
        width: manifest.width,
        num_classes: manifest.num_classes,
        subjects,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn write_payload(path: &Path, bytes: &[u8], gzip: bool) -> Result<()> {
    if gzip {
        use std::io::Write;
        let file = fs::File::create(path).map_err(|e| dataset_err(path, e.to_string()))?;
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(|e| dataset_err(path, e.to_string()))?;
        enc.finish().map_err(|e| dataset_err(path, e.to_string()))?;
    } else {
        fs::write(path, bytes).map_err(|e| dataset_err(path, e.to_string()))?;
    }
    Ok(())
}

/// Write a dataset directory (manifest plus payload files). In-memory
/// datasets are already normalized, so the manifest marks them as such.
pub fn save_dataset(dataset: &SliceDataset, dir: &Path, gzip: bool) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| dataset_err(dir, e.to_string()))?;
    let ext = if gzip { ".gz" } else { "" };

    let mut manifest = Manifest {
        modality: dataset.modality,
        spacing: dataset.spacing,
        height: dataset.height,
        width: dataset.width,
        num_classes: dataset.num_classes,
        normalized: true,
        subjects: Vec::with_capacity(dataset.subjects.len()),
    };
    for subject in &dataset.subjects {
        let mut entries = Vec::with_capacity(subject.slices.len());
        for (i, slice) in subject.slices.iter().enumerate() {
            let image_name = format!("{}_{i:03}.img.bin{ext}", subject.id);
            let image_bytes: Vec<u8> =
                slice.image.iter().flat_map(|v| v.to_le_bytes()).collect();
            write_payload(&dir.join(&image_name), &image_bytes, gzip)?;

            let label_name = slice.label.as_ref().map(|label| {
                let name = format!("{}_{i:03}.lbl.bin{ext}", subject.id);
                (name, label.clone())
            });
            if let Some((name, bytes)) = &label_name {
                write_payload(&dir.join(name), bytes, gzip)?;
            }
            entries.push(ManifestSlice {
                image: image_name,
                label: label_name.map(|(name, _)| name),
            });
        }
        manifest.subjects.push(ManifestSubject {
            id: subject.id.clone(),
            slices: entries,
        });
    }

    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(|e| dataset_err(&manifest_path, e.to_string()))?;
    Ok(())
}

/// Subject-level train/test partition: shuffle subject indices with the
/// given seed, take `round(train_fraction * n)` for training (clamped so
/// both sides are nonempty when n >= 2). Returns sorted index lists.
pub fn subject_split(
    n_subjects: usize,
    train_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n_subjects).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = if n_subjects < 2 {
        n_subjects
    } else {
        ((n_subjects as f64 * train_fraction).round() as usize).clamp(1, n_subjects - 1)
    };
    let mut train: Vec<usize> = indices[..n_train].to_vec();
    let mut test: Vec<usize> = indices[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Convenience: resolve a dataset path that may come from an env override.
pub fn resolve_dir(configured: &str, env_var: &str) -> PathBuf {
    match std::env::var(env_var) {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(configured),
    }
}
