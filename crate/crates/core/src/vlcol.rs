//! Vision-language covariance cosine alignment: class-masked pixel features,
//! a per-class EMA memory, covariance matrices over the feature axis, and the
//! Frobenius cosine distance between the pixel and text covariances.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::types::LabelBatch;

/// Mean semantic feature per class present in the batch.
///
/// `labels` must already be at the feature resolution (nearest-neighbor
/// downsampled ground truth). Returns a C×256 matrix whose present rows are
/// the masked means (gradient-attached) and absent rows are zero, plus the
/// presence flags.
pub fn class_pixel_features(
    f_sem: &Tensor,
    labels: &LabelBatch,
) -> Result<(Tensor, Vec<bool>)> {
    let (b, d, h, w) = f_sem.dims4()?;
    let (lb, lh, lw) = labels.dims();
    if (b, h, w) != (lb, lh, lw) {
        return Err(Error::Shape(format!(
            "features {:?} vs labels ({lb}, {lh}, {lw})",
            f_sem.dims()
        )));
    }
    let c = labels.num_classes();
    let mask = labels.one_hot(f_sem.dtype(), f_sem.device())?; // B×C×h×w
    let mask_flat = mask.reshape((b, c, h * w))?;
    let feat_flat = f_sem.reshape((b, d, h * w))?;
    // per-sample class sums, then pooled over the batch
    let sums = mask_flat
        .matmul(&feat_flat.transpose(1, 2)?.contiguous()?)?
        .sum(0)?; // C×d
    let counts_t = mask_flat.sum(2)?.sum(0)?; // C
    let counts = counts_t.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let present: Vec<bool> = counts.iter().map(|&n| n > 0.0).collect();
    // divide by max(count, 1) so absent rows stay zero instead of NaN
    let safe: Vec<f64> = counts.iter().map(|&n| n.max(1.0)).collect();
    let denom = Tensor::from_vec(safe, (c, 1), f_sem.device())?.to_dtype(f_sem.dtype())?;
    let means = sums.broadcast_div(&denom)?;
    Ok((means, present))
}

/// Per-class EMA of pixel features; history is stored detached.
pub struct ClassFeatureMemory {
    rows: Vec<Tensor>,
    flags: Vec<bool>,
    decay: f64,
    dim: usize,
    dtype: DType,
    device: Device,
}

impl ClassFeatureMemory {
    pub fn new(num_classes: usize, dim: usize, decay: f64, dtype: DType) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("memory decay {decay} outside [0,1]")));
        }
        let device = Device::Cpu;
        let rows = (0..num_classes)
            .map(|_| Tensor::zeros(dim, dtype, &device))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            rows,
            flags: vec![false; num_classes],
            decay,
            dim,
            dtype,
            device,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn row(&self, c: usize) -> &Tensor {
        &self.rows[c]
    }

    /// EMA update from current batch features: flagged rows move convexly
    /// (λ·old + (1−λ)·new), first observations initialize the row. Values are
    /// stored detached.
    pub fn update(&mut self, feats: &Tensor, present: &[bool]) -> Result<()> {
        let (c, d) = feats.dims2()?;
        if c != self.rows.len() || d != self.dim {
            return Err(Error::Shape(format!(
                "memory update with {c}×{d}, expected {}×{}",
                self.rows.len(),
                self.dim
            )));
        }
        for (cls, &here) in present.iter().enumerate() {
            if !here {
                continue;
            }
            let new_row = feats.narrow(0, cls, 1)?.reshape(d)?.detach();
            self.rows[cls] = if self.flags[cls] {
                ((&self.rows[cls] * self.decay)? + (new_row * (1.0 - self.decay))?)?.detach()
            } else {
                new_row
            };
            self.flags[cls] = true;
        }
        Ok(())
    }

    /// (C×256 rows with zeros for never-seen classes, flags) for checkpoints.
    pub fn export(&self) -> Result<(Tensor, Vec<bool>)> {
        Ok((Tensor::stack(&self.rows, 0)?, self.flags.clone()))
    }

    pub fn load(&mut self, rows: &Tensor, flags: &[bool]) -> Result<()> {
        let (c, d) = rows.dims2()?;
        if c != self.rows.len() || d != self.dim || flags.len() != c {
            return Err(Error::Checkpoint(format!(
                "memory state {c}×{d} ({} flags) does not match {}×{}",
                flags.len(),
                self.rows.len(),
                self.dim
            )));
        }
        for cls in 0..c {
            self.rows[cls] = rows.narrow(0, cls, 1)?.reshape(d)?.to_dtype(self.dtype)?.detach();
        }
        self.flags = flags.to_vec();
        Ok(())
    }

    /// Loss-side view of one class row: EMA history detached, the current
    /// batch contribution gradient-attached.
    fn effective_row(&self, cls: usize, current: &Tensor) -> Result<Tensor> {
        let cur = current.narrow(0, cls, 1)?.reshape(self.dim)?;
        ((self.rows[cls].detach() * self.decay)? + (cur * (1.0 - self.decay))?)
            .map_err(Into::into)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }
}

/// Sample covariance over the feature axis: Σ[i,j] = Σ_k (x_ik−x̄_i)(x_jk−x̄_j)/(d−1).
pub fn covariance_matrix(rows: &Tensor) -> Result<Tensor> {
    let (k, d) = rows.dims2()?;
    if k < 2 {
        return Err(Error::Shape(format!("covariance needs ≥ 2 rows, got {k}")));
    }
    if d < 2 {
        return Err(Error::Shape(format!("covariance needs ≥ 2 features, got {d}")));
    }
    let mean = rows.mean_keepdim(1)?;
    let centered = rows.broadcast_sub(&mean)?;
    Ok(centered
        .matmul(&centered.t()?.contiguous()?)?
        .affine(1.0 / (d as f64 - 1.0), 0.0)?)
}

/// 1 − ⟨A,B⟩_F / (‖A‖_F‖B‖_F); `None` when either norm vanishes.
pub fn frobenius_cosine_distance(a: &Tensor, b: &Tensor) -> Result<Option<Tensor>> {
    let dot = a.mul(b)?.sum_all()?;
    let na = a.sqr()?.sum_all()?.sqrt()?;
    let nb = b.sqr()?.sum_all()?.sqrt()?;
    let na_v = na.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let nb_v = nb.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if na_v <= 1e-30 || nb_v <= 1e-30 {
        return Ok(None);
    }
    let cos = dot.div(&na.mul(&nb)?)?;
    Ok(Some(cos.affine(-1.0, 1.0)?))
}

/// Outcome of one VLCoL evaluation; skipped steps contribute no gradient.
pub struct VlcolOutcome {
    pub value: Option<Tensor>,
    pub used_classes: Vec<usize>,
}

impl VlcolOutcome {
    pub fn skipped(&self) -> bool {
        self.value.is_none()
    }
}

/// Covariance cosine loss between memory-smoothed pixel features and class
/// text embeddings, over classes both present in the batch and already held
/// in the memory. Fewer than two such classes, or a vanishing covariance,
/// yields a skip.
pub fn vlcol_loss(
    mem: &ClassFeatureMemory,
    current_feats: &Tensor,
    present: &[bool],
    t_class: &Tensor,
) -> Result<VlcolOutcome> {
    let (tc, _) = t_class.dims2()?;
    if tc != mem.num_classes() || present.len() != mem.num_classes() {
        return Err(Error::Shape(format!(
            "t_class rows {tc} / presence {} vs {} classes",
            present.len(),
            mem.num_classes()
        )));
    }
    let used: Vec<usize> = (0..mem.num_classes())
        .filter(|&c| present[c] && mem.flags()[c])
        .collect();
    if used.len() < 2 {
        return Ok(VlcolOutcome {
            value: None,
            used_classes: used,
        });
    }
    let pixel_rows = Tensor::stack(
        &used
            .iter()
            .map(|&c| mem.effective_row(c, current_feats))
            .collect::<Result<Vec<_>>>()?,
        0,
    )?;
    let text_rows = Tensor::stack(
        &used
            .iter()
            .map(|&c| t_class.narrow(0, c, 1)?.reshape(t_class.dim(1)?).map_err(Into::into))
            .collect::<Result<Vec<_>>>()?,
        0,
    )?;
    let sigma_p = covariance_matrix(&pixel_rows)?;
    let sigma_t = covariance_matrix(&text_rows)?;
    Ok(VlcolOutcome {
        value: frobenius_cosine_distance(&sigma_p, &sigma_t)?,
        used_classes: used,
    })
}
