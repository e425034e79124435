//! Gradient-weighted class attribution maps.
//!
//! The map for class c at a tapped layer is ReLU(Σ_k α_k A_k) with A_k the
//! tapped activation channels and α_k the spatial mean of ∂score/∂A_k,
//! where score is the total class-c logit mass. Each image's map is scaled
//! by its maximum into [0,1] and upsampled to input resolution.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::net::SegNetwork;
use crate::nn::ops;

/// Layers that can be tapped for attribution.
pub const GRADCAM_LAYERS: [&str; 3] = ["encoder", "neck", "dynamic-conv"];

fn unknown_layer(given: &str) -> Error {
    Error::UnknownLayer {
        given: given.to_string(),
        options: GRADCAM_LAYERS.join(", "),
    }
}

/// B×H×W heatmaps in [0,1] attributing class `class_idx` to spatial
/// locations of the tapped layer. An image whose map has no positive
/// response comes back all zeros.
pub fn gradcam_map(
    net: &SegNetwork,
    images: &Tensor,
    t_class: &Tensor,
    class_idx: usize,
    layer: &str,
) -> Result<Tensor> {
    let (_, _, in_h, in_w) = images.dims4()?;
    if class_idx >= net.num_classes() {
        return Err(Error::Config(format!(
            "class index {class_idx} out of range for {} classes",
            net.num_classes()
        )));
    }

    // Run to the tap, detach, re-enter through a gradient-tracked variable,
    // and complete the pass so only the tap receives a gradient.
    let (tap, fwd) = match layer {
        "encoder" => {
            let f_high = net.backbone.forward(images)?.detach();
            let var = Var::from_tensor(&f_high)?;
            let fwd = net.forward_from_features(var.as_tensor().clone(), t_class, in_h, in_w)?;
            (var, fwd)
        }
        "neck" => {
            let f_high = net.backbone.forward(images)?.detach();
            let f_sem = net.neck.forward(&f_high)?.detach();
            let var = Var::from_tensor(&f_sem)?;
            let fwd =
                net.forward_from_semantic(f_high, var.as_tensor().clone(), t_class, in_h, in_w)?;
            (var, fwd)
        }
        "dynamic-conv" => {
            let f_high = net.backbone.forward(images)?.detach();
            let f_sem = net.neck.forward(&f_high)?;
            let f_aux = net.aux_head.forward(&f_sem)?;
            let f_g = net.fusion.global_visual_vector(&f_high)?;
            let q_fused = net.fusion.fuse_query(&f_g, t_class)?;
            let f_fused = net.fusion.attend(&q_fused, &f_g)?;
            let params = net.fusion.controller(&f_fused)?;
            let f_conv = net.fusion.dynamic_conv(&f_sem, &params)?.detach();
            let var = Var::from_tensor(&f_conv)?;
            let fwd = net.finish(
                f_high,
                f_sem,
                f_aux,
                f_g,
                f_fused,
                var.as_tensor().clone(),
                t_class,
                in_h,
                in_w,
            )?;
            (var, fwd)
        }
        other => return Err(unknown_layer(other)),
    };

    let score = fwd.logits.narrow(1, class_idx, 1)?.sum_all()?;
    let grads = score.backward()?;
    let grad = grads
        .get(tap.as_tensor())
        .ok_or_else(|| Error::Config("tapped activation received no gradient".into()))?;

    let weights = grad.mean_keepdim(2)?.mean_keepdim(3)?;
    let cam = tap.as_tensor().broadcast_mul(&weights)?.sum(1)?;

    let (b, fh, fw) = cam.dims3()?;
    let flat = cam
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let mut scaled = vec![0f32; b * fh * fw];
    for i in 0..b {
        let plane = &flat[i * fh * fw..(i + 1) * fh * fw];
        let top = plane.iter().fold(0.0f32, |m, &v| m.max(v));
        if top > 0.0 {
            for (dst, &v) in scaled[i * fh * fw..(i + 1) * fh * fw].iter_mut().zip(plane) {
                *dst = v.max(0.0) / top;
            }
        }
    }
    let low = Tensor::from_vec(scaled, (b, 1, fh, fw), images.device())?;
    let up = ops::upsample_bilinear(&low, in_h, in_w)?;
    // Bilinear interpolation of [0,1] values stays in [0,1].
    up.reshape((b, in_h, in_w)).map_err(Into::into)
}

/// Chebyshev dilation of a boolean mask by `radius` pixels.
pub fn dilate_mask(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    assert_eq!(mask.len(), h * w, "mask length must match the grid");
    if radius == 0 {
        return mask.to_vec();
    }
    let r = radius as isize;
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !mask[(y * w as isize + x) as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                        out[(ny * w as isize + nx) as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Fraction of total heatmap mass falling inside a mask; 0 for an all-zero
/// map.
pub fn mass_inside(heatmap: &[f32], mask: &[bool]) -> f64 {
    assert_eq!(heatmap.len(), mask.len(), "heatmap and mask sizes differ");
    let mut total = 0f64;
    let mut inside = 0f64;
    for (&v, &m) in heatmap.iter().zip(mask) {
        let v = v as f64;
        total += v;
        if m {
            inside += v;
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}
