//! Dataset handling: manifest-driven slice datasets, synthetic phantom
//! generation, augmentation, and batch sampling.

pub mod augment;
pub mod manifest;
pub mod phantom;
pub mod sampler;

pub use augment::{augment_pair, augment_seeded, AugmentParams};
pub use manifest::{load_manifest, save_dataset, subject_split};
pub use phantom::{class_intensity_histograms, generate_phantoms, histogram_l1, PhantomConfig};
pub use sampler::{assemble_batch, draw_slice_indices, BatchOptions};

use crate::error::{Error, Result};
use crate::types::Modality;

/// One 2D slice: row-major intensities plus an optional label grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub image: Vec<f32>,
    pub label: Option<Vec<u8>>,
}

/// One subject's ordered slice stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub slices: Vec<SliceRecord>,
}

/// A modality-tagged collection of subjects with uniform slice geometry.
/// Intensities are normalized to [-1, 1]; a dataset is either fully labeled
/// or fully unlabeled.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceDataset {
    pub modality: Modality,
    pub spacing: (f64, f64),
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub subjects: Vec<Subject>,
}

impl SliceDataset {
    /// Validate geometry, label range, and all-or-none labeling.
    pub fn validate(&self) -> Result<()> {
        let pixels = self.height * self.width;
        let mut labeled = 0usize;
        let mut total = 0usize;
        for subject in &self.subjects {
            for (i, slice) in subject.slices.iter().enumerate() {
                if slice.image.len() != pixels {
                    return Err(Error::Shape(format!(
                        "subject `{}` slice {i}: image has {} pixels, expected {pixels}",
                        subject.id,
                        slice.image.len()
                    )));
                }
                total += 1;
                if let Some(label) = &slice.label {
                    labeled += 1;
                    if label.len() != pixels {
                        return Err(Error::Shape(format!(
                            "subject `{}` slice {i}: label has {} pixels, expected {pixels}",
                            subject.id,
                            label.len()
                        )));
                    }
                    if let Some(&bad) = label.iter().find(|&&v| (v as usize) >= self.num_classes) {
                        return Err(Error::LabelOutOfRange {
                            value: bad,
                            classes: self.num_classes,
                        });
                    }
                }
            }
        }
        if labeled != 0 && labeled != total {
            return Err(Error::Config(format!(
                "dataset mixes labeled and unlabeled slices ({labeled} of {total} labeled)"
            )));
        }
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        self.subjects
            .first()
            .and_then(|s| s.slices.first())
            .map(|s| s.label.is_some())
            .unwrap_or(false)
    }

    pub fn slice_count(&self) -> usize {
        self.subjects.iter().map(|s| s.slices.len()).sum()
    }

    /// New dataset keeping only the given subject indices, in index order.
    pub fn subset(&self, indices: &[usize]) -> Result<SliceDataset> {
        let mut subjects = Vec::with_capacity(indices.len());
        for &i in indices {
            let subject = self.subjects.get(i).ok_or_else(|| {
                Error::Config(format!(
                    "subject index {i} out of range for {} subjects",
                    self.subjects.len()
                ))
            })?;
            subjects.push(subject.clone());
        }
        Ok(SliceDataset {
            subjects,
            ..self.clone()
        })
    }

    /// Drop all labels, e.g. to treat a generated target split as unlabeled.
    pub fn without_labels(&self) -> SliceDataset {
        let mut out = self.clone();
        for subject in &mut out.subjects {
            for slice in &mut subject.slices {
                slice.label = None;
            }
        }
        out
    }
}

/// Normalize one slice in place to [-1, 1]: clip to the 1st and 99th
/// percentiles, then min-max rescale. A constant slice becomes all zeros.
pub fn normalize_intensities(values: &mut [f32]) {
    if values.is_empty() {
        return;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite intensity"));
    let idx = |q: f64| ((sorted.len() - 1) as f64 * q).round() as usize;
    let lo = sorted[idx(0.01)];
    let hi = sorted[idx(0.99)];
    if hi <= lo {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let scale = 2.0 / (hi - lo);
    for v in values.iter_mut() {
        *v = (v.clamp(lo, hi) - lo) * scale - 1.0;
    }
}

/// Mix identifying parts into one RNG seed (splitmix64 chain). Derived
/// per-step seeds keep sampling and augmentation reproducible without
/// serializing RNG state.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e3779b97f4a7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        h = z ^ (z >> 31);
    }
    h
}
