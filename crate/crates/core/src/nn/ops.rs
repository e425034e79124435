//! Free tensor ops shared across the networks and losses.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let exp = x.broadcast_sub(&max)?.exp()?;
    let denom = exp.sum_keepdim(dim)?;
    Ok(exp.broadcast_div(&denom)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    let scaled = (x * slope)?;
    Ok(x.maximum(&scaled)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    let one = Tensor::ones((), x.dtype(), x.device())?;
    Ok(one.broadcast_div(&(x.neg()?.exp()? + 1.0)?)?)
}

/// log(max(x, floor)); the floor keeps 0-probabilities finite.
pub fn log_clamped(x: &Tensor, floor: f64) -> Result<Tensor> {
    Ok(x.clamp(floor, f64::INFINITY)?.log()?)
}

/// Row-interpolation matrix for bilinear resizing (half-pixel centers).
pub fn interp_matrix(in_len: usize, out_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, in_len as f64 - 1.0);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        data[i * in_len + lo] += 1.0 - frac;
        data[i * in_len + hi] += frac;
    }
    Ok(Tensor::from_vec(data, (out_len, in_len), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of a B×C×h×w map to B×C×out_h×out_w, differentiable.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let row = interp_matrix(h, out_h, x.dtype(), x.device())?;
    let col = interp_matrix(w, out_w, x.dtype(), x.device())?;
    let flat = x.reshape((b * c, h, w))?;
    let resized = row
        .unsqueeze(0)?
        .broadcast_matmul(&flat)?
        .broadcast_matmul(&col.t()?)?;
    Ok(resized.reshape((b, c, out_h, out_w))?)
}

/// Source index per output position for nearest-neighbor resizing
/// (half-pixel centers, matching the bilinear convention).
pub fn nearest_indices(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| (((i as f64 + 0.5) * scale).floor() as usize).min(in_len - 1))
        .collect()
}

/// One-hot encode integer maps into a B×C×H×W tensor.
pub fn one_hot(
    values: &[u8],
    dims: (usize, usize, usize),
    num_classes: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (b, h, w) = dims;
    assert_eq!(values.len(), b * h * w);
    let mut data = vec![0f32; b * num_classes * h * w];
    let plane = h * w;
    for (i, &v) in values.iter().enumerate() {
        let batch = i / plane;
        let pix = i % plane;
        data[batch * num_classes * plane + (v as usize) * plane + pix] = 1.0;
    }
    Ok(Tensor::from_vec(data, (b, num_classes, h, w), device)?.to_dtype(dtype)?)
}

/// Per-pixel channel argmax with ties broken toward the lowest index.
pub fn argmax_channels(probs: &Tensor) -> Result<Vec<u8>> {
    let (b, c, h, w) = probs.dims4()?;
    let flat = probs.to_dtype(DType::F64)?.to_vec1_flat()?;
    let plane = h * w;
    let mut out = vec![0u8; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for ch in 0..c {
                let v = flat[bi * c * plane + ch * plane + p];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            out[bi * plane + p] = best as u8;
        }
    }
    Ok(out)
}

/// Flattens to a contiguous f64 vector; helper for CPU-side post-processing.
pub trait ToFlatVec {
    fn to_vec1_flat(&self) -> Result<Vec<f64>>;
}

impl ToFlatVec for Tensor {
    fn to_vec1_flat(&self) -> Result<Vec<f64>> {
        Ok(self
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }
}
