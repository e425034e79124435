//! Random slice sampling and tensor batch assembly.
//!
//! Batch composition at step `k` depends only on (seed, k), so interrupted
//! and resumed runs draw identical batches without serializing RNG state.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{augment, mix_seed, SliceDataset};
use crate::error::{Error, Result};
use crate::types::{ImageBatch, LabelBatch};

const SAMPLER_TAG: u64 = 0x5a;
const AUGMENT_TAG: u64 = 0xa6;

/// Draw `batch` random (subject, slice) picks, uniform over all slices,
/// with replacement.
pub fn draw_slice_indices(
    dataset: &SliceDataset,
    seed: u64,
    step: u64,
    batch: usize,
) -> Result<Vec<(usize, usize)>> {
    let mut flat = Vec::new();
    for (si, subject) in dataset.subjects.iter().enumerate() {
        for i in 0..subject.slices.len() {
            flat.push((si, i));
        }
    }
    if flat.is_empty() {
        return Err(Error::Config("cannot sample from an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[SAMPLER_TAG, seed, step]));
    Ok((0..batch).map(|_| flat[rng.random_range(0..flat.len())]).collect())
}

#[derive(Clone, Copy, Debug)]
pub struct BatchOptions {
    /// Apply seeded augmentation; the effective seed mixes (seed, step,
    /// position in batch).
    pub augment: bool,
    pub seed: u64,
    pub step: u64,
    pub dtype: DType,
}

impl BatchOptions {
    pub fn plain(dtype: DType) -> Self {
        BatchOptions {
            augment: false,
            seed: 0,
            step: 0,
            dtype,
        }
    }
}

/// Build tensors for the picked slices: images as B×1×H×W, labels (when the
/// dataset is labeled) as a label batch.
pub fn assemble_batch(
    dataset: &SliceDataset,
    picks: &[(usize, usize)],
    opts: &BatchOptions,
    device: &Device,
) -> Result<(ImageBatch, Option<LabelBatch>)> {
    if picks.is_empty() {
        return Err(Error::Config("batch must contain at least one slice".into()));
    }
    let (h, w) = (dataset.height, dataset.width);
    let labeled = dataset.is_labeled();
    let mut images = Vec::with_capacity(picks.len() * h * w);
    let mut labels = labeled.then(|| Vec::with_capacity(picks.len() * h * w));

    for (k, &(si, i)) in picks.iter().enumerate() {
        let subject = dataset.subjects.get(si).ok_or_else(|| {
            Error::Config(format!("subject index {si} out of range"))
        })?;
        let slice = subject.slices.get(i).ok_or_else(|| {
            Error::Config(format!("slice index {i} out of range for subject `{}`", subject.id))
        })?;

        if opts.augment {
            let aug_seed = mix_seed(&[AUGMENT_TAG, opts.seed, opts.step, k as u64]);
            let (img, lbl) =
                augment::augment_seeded(&slice.image, slice.label.as_deref(), h, w, aug_seed);
            images.extend_from_slice(&img);
            if let (Some(out), Some(lbl)) = (&mut labels, lbl) {
                out.extend_from_slice(&lbl);
            }
        } else {
            images.extend_from_slice(&slice.image);
            if let (Some(out), Some(lbl)) = (&mut labels, &slice.label) {
                out.extend_from_slice(lbl);
            }
        }
    }

    let tensor = Tensor::from_vec(images, (picks.len(), 1, h, w), device)?.to_dtype(opts.dtype)?;
    let image_batch = ImageBatch::new(tensor, dataset.modality)?;
    let label_batch = labels
        .map(|values| LabelBatch::new(values, (picks.len(), h, w), dataset.num_classes))
        .transpose()?;
    Ok((image_batch, label_batch))
}
