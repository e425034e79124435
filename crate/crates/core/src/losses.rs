//! Source-domain segmentation objective: cross-entropy plus soft Dice.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::ops::log_clamped;
use crate::types::LabelBatch;

pub const DICE_EPS: f64 = 1e-5;
pub const LOG_FLOOR: f64 = 1e-12;

fn check_shapes(probs: &Tensor, labels: &LabelBatch) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = probs.dims4()?;
    let (lb, lh, lw) = labels.dims();
    if (b, h, w) != (lb, lh, lw) {
        return Err(Error::Shape(format!(
            "probs {:?} vs labels ({lb}, {lh}, {lw})",
            probs.dims()
        )));
    }
    if labels.num_classes() != c {
        return Err(Error::Shape(format!(
            "probs have {c} classes, labels declare {}",
            labels.num_classes()
        )));
    }
    Ok((b, c, h, w))
}

/// Mean over all pixels of −log P[y], with the log clamped at 1e-12.
pub fn ce_loss(probs: &Tensor, labels: &LabelBatch) -> Result<Tensor> {
    check_shapes(probs, labels)?;
    let one_hot = labels.one_hot(probs.dtype(), probs.device())?;
    let picked = probs.mul(&one_hot)?.sum(1)?;
    let nll = log_clamped(&picked, LOG_FLOOR)?.neg()?;
    Ok(nll.mean_all()?)
}

/// Soft Dice loss: 1 − mean over all C classes of the batch-pooled overlap
/// (2·ΣP_c·1[Y=c] + ε) / (ΣP_c + Σ1[Y=c] + ε).
pub fn dice_loss(probs: &Tensor, labels: &LabelBatch) -> Result<Tensor> {
    let (_, c, _, _) = check_shapes(probs, labels)?;
    let one_hot = labels.one_hot(probs.dtype(), probs.device())?;
    // pool over batch and space, keep the class axis
    let inter = probs.mul(&one_hot)?.sum(D::Minus1)?.sum(D::Minus1)?.sum(0)?;
    let p_sum = probs.sum(D::Minus1)?.sum(D::Minus1)?.sum(0)?;
    let y_sum = one_hot.sum(D::Minus1)?.sum(D::Minus1)?.sum(0)?;
    let two = (inter * 2.0)?;
    let num = (two + DICE_EPS)?;
    let den = ((p_sum + y_sum)? + DICE_EPS)?;
    let per_class = num.div(&den)?;
    let mean = per_class.sum_all()?.affine(1.0 / c as f64, 0.0)?;
    Ok(mean.affine(-1.0, 1.0)?)
}

/// Supervised objective: cross-entropy plus Dice, source batches only.
pub fn seg_loss(probs: &Tensor, labels: &LabelBatch) -> Result<Tensor> {
    Ok((ce_loss(probs, labels)? + dice_loss(probs, labels)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::{softmax, ToFlatVec};
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DEV: &Device = &Device::Cpu;

    fn labels(values: Vec<u8>, b: usize, h: usize, w: usize, c: usize) -> LabelBatch {
        LabelBatch::new(values, (b, h, w), c).unwrap()
    }

    /// One-hot probabilities matching the labels exactly.
    fn one_hot_probs(lab: &LabelBatch) -> Tensor {
        lab.one_hot(candle_core::DType::F64, DEV).unwrap()
    }

    fn random_case(seed: u64, b: usize, c: usize, h: usize, w: usize) -> (Tensor, LabelBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * c * h * w;
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let logits = Tensor::from_vec(raw, (b, c, h, w), DEV).unwrap();
        let probs = softmax(&logits, 1).unwrap();
        let lab: Vec<u8> = (0..b * h * w).map(|_| rng.random_range(0..c) as u8).collect();
        (probs, labels(lab, b, h, w, c))
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let lab = labels(vec![0, 1, 2, 1], 1, 2, 2, 3);
        let p = one_hot_probs(&lab);
        let ce = ce_loss(&p, &lab).unwrap().to_scalar::<f64>().unwrap();
        assert!(ce.abs() < 1e-10, "ce {ce}");
        let d = dice_loss(&p, &lab).unwrap().to_scalar::<f64>().unwrap();
        assert!(d.abs() < 1e-4, "dice {d}");
    }

    #[test]
    fn uniform_ce_is_log_c() {
        let c = 5;
        let lab = labels(vec![3; 8], 2, 2, 2, c);
        let p = Tensor::full(1.0f64 / c as f64, (2, c, 2, 2), DEV).unwrap();
        let ce = ce_loss(&p, &lab).unwrap().to_scalar::<f64>().unwrap();
        assert!((ce - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn disjoint_dice_class_term_is_one() {
        // prediction fully on class 1 where truth is class 2 and vice versa
        let lab = labels(vec![2, 2, 2, 2], 1, 2, 2, 3);
        let mut raw = vec![0.0f64; 3 * 4];
        for p in 0..4 {
            raw[4 + p] = 1.0; // class 1 everywhere
        }
        let probs = Tensor::from_vec(raw, (1, 3, 2, 2), DEV).unwrap();
        let d = dice_loss(&probs, &lab).unwrap().to_scalar::<f64>().unwrap();
        // class 0: empty/empty → ε/ε = 1; classes 1 and 2 disjoint → ≈0 each
        let expected = 1.0 - (1.0 + 0.0 + 0.0) / 3.0;
        assert!((d - expected).abs() < 1e-4, "dice {d} vs {expected}");
    }

    #[test]
    fn ce_matches_loop_oracle() {
        let (probs, lab) = random_case(11, 2, 3, 4, 4);
        let got = ce_loss(&probs, &lab).unwrap().to_scalar::<f64>().unwrap();

        let flat = probs.to_vec1_flat().unwrap();
        let (b, c, h, w) = (2, 3, 4, 4);
        let mut acc = 0.0;
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let cls = lab.values()[bi * h * w + y * w + x] as usize;
                    let p = flat[bi * c * h * w + cls * h * w + y * w + x];
                    acc += -(p.max(1e-12)).ln();
                }
            }
        }
        let want = acc / (b * h * w) as f64;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn dice_matches_loop_oracle() {
        let (probs, lab) = random_case(13, 2, 3, 4, 4);
        let got = dice_loss(&probs, &lab).unwrap().to_scalar::<f64>().unwrap();

        let flat = probs.to_vec1_flat().unwrap();
        let (b, c, h, w) = (2, 3, 4, 4);
        let mut mean = 0.0;
        for cls in 0..c {
            let mut inter = 0.0;
            let mut p_sum = 0.0;
            let mut y_sum = 0.0;
            for bi in 0..b {
                for p in 0..h * w {
                    let pv = flat[bi * c * h * w + cls * h * w + p];
                    let yv = (lab.values()[bi * h * w + p] as usize == cls) as u8 as f64;
                    inter += pv * yv;
                    p_sum += pv;
                    y_sum += yv;
                }
            }
            mean += (2.0 * inter + 1e-5) / (p_sum + y_sum + 1e-5);
        }
        let want = 1.0 - mean / c as f64;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn seg_loss_is_exact_sum() {
        let (probs, lab) = random_case(17, 1, 4, 3, 3);
        let s = seg_loss(&probs, &lab).unwrap().to_scalar::<f64>().unwrap();
        let ce = ce_loss(&probs, &lab).unwrap().to_scalar::<f64>().unwrap();
        let d = dice_loss(&probs, &lab).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(s, ce + d);
    }

    #[test]
    fn losses_are_class_permutation_equivariant() {
        let (probs, lab) = random_case(19, 2, 4, 3, 3);
        let perm = [2usize, 0, 3, 1];
        let idx = Tensor::from_vec(perm.iter().map(|&v| v as u32).collect::<Vec<_>>(), 4, DEV)
            .unwrap();
        let probs_p = probs.index_select(&idx, 1).unwrap();
        // label value v becomes the index where perm maps to v
        let mut inv = [0u8; 4];
        for (new_idx, &old) in perm.iter().enumerate() {
            inv[old] = new_idx as u8;
        }
        let lab_p = labels(
            lab.values().iter().map(|&v| inv[v as usize]).collect(),
            2,
            3,
            3,
            4,
        );
        for f in [ce_loss, dice_loss] {
            let a = f(&probs, &lab).unwrap().to_scalar::<f64>().unwrap();
            let b = f(&probs_p, &lab_p).unwrap().to_scalar::<f64>().unwrap();
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn dice_range_and_ce_nonnegative() {
        for seed in 0..20 {
            let (probs, lab) = random_case(100 + seed, 1, 3, 3, 3);
            let d = dice_loss(&probs, &lab).unwrap().to_scalar::<f64>().unwrap();
            assert!((0.0..=1.0 + 1e-4).contains(&d), "dice {d}");
            let ce = ce_loss(&probs, &lab).unwrap().to_scalar::<f64>().unwrap();
            assert!(ce >= 0.0);
        }
    }
}
