//! Adversarial structural alignment: per-pixel self-information maps and the
//! binary cross-entropy pair for the patch discriminators.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::ops::log_clamped;

pub const LOG_FLOOR: f64 = 1e-12;

/// Channel-wise self-information E = −P·log(P)/log(C); zero exactly where a
/// probability is 0 or 1, and 1/C per channel on a uniform pixel. The log(C)
/// normalization keeps the adversarial weight comparable across class counts.
pub fn self_information_map(probs: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = probs.dims4()?;
    if c < 2 {
        return Err(Error::Shape("self-information needs ≥ 2 channels".into()));
    }
    let log_p = log_clamped(probs, LOG_FLOOR)?;
    let scale = -1.0 / (c as f64).ln();
    Ok(probs.mul(&log_p)?.affine(scale, 0.0)?)
}

/// Numerically stable BCE with logits against a constant target in {0,1}:
/// mean of max(x,0) − x·t + ln(1 + e^{−|x|}).
pub fn bce_with_logits_const(logits: &Tensor, target: f64) -> Result<Tensor> {
    if target != 0.0 && target != 1.0 {
        return Err(Error::Config(format!("BCE target {target} must be 0 or 1")));
    }
    let zeros = logits.zeros_like()?;
    let pos = logits.maximum(&zeros)?;
    let softplus = log_clamped(&logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?, LOG_FLOOR)?;
    let loss = ((pos - logits.affine(target, 0.0)?)? + softplus)?;
    Ok(loss.mean_all()?)
}

/// Discriminator objective: source patches → 1, target patches → 0, for each
/// branch; the two (src, tgt) BCE means are summed per branch and the two
/// branches added. Inputs must come from detached maps.
pub fn d_loss(
    d_src_main: &Tensor,
    d_tgt_main: &Tensor,
    d_src_aux: &Tensor,
    d_tgt_aux: &Tensor,
) -> Result<Tensor> {
    let main = (bce_with_logits_const(d_src_main, 1.0)? + bce_with_logits_const(d_tgt_main, 0.0)?)?;
    let aux = (bce_with_logits_const(d_src_aux, 1.0)? + bce_with_logits_const(d_tgt_aux, 0.0)?)?;
    Ok((main + aux)?)
}

/// Single-branch discriminator objective, for runs without the aux branch.
pub fn d_loss_branch(d_src: &Tensor, d_tgt: &Tensor) -> Result<Tensor> {
    Ok((bce_with_logits_const(d_src, 1.0)? + bce_with_logits_const(d_tgt, 0.0)?)?)
}

/// Generator-side adversarial term: fool both discriminators on target maps,
/// aux branch scaled by `aux_weight`.
pub fn g_adv_loss(d_tgt_main: &Tensor, d_tgt_aux: &Tensor, aux_weight: f64) -> Result<Tensor> {
    let main = bce_with_logits_const(d_tgt_main, 1.0)?;
    let aux = bce_with_logits_const(d_tgt_aux, 1.0)?.affine(aux_weight, 0.0)?;
    Ok((main + aux)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::{softmax, ToFlatVec};
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DEV: &Device = &Device::Cpu;

    #[test]
    fn one_hot_pixel_has_zero_self_information() {
        let mut raw = vec![0.0f64; 3 * 4];
        for p in 0..4 {
            raw[3 * 0 + p] = 1.0; // all mass on class 0 (layout c*hw + p)
        }
        let probs = Tensor::from_vec(raw, (1, 3, 2, 2), DEV).unwrap();
        let e = self_information_map(&probs).unwrap().to_vec1_flat().unwrap();
        assert!(e.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn uniform_pixel_yields_one_over_c() {
        let c = 5;
        let probs = Tensor::full(1.0f64 / c as f64, (1, c, 2, 2), DEV).unwrap();
        let e = self_information_map(&probs).unwrap().to_vec1_flat().unwrap();
        assert!(e.iter().all(|v| (v - 1.0 / c as f64).abs() < 1e-12));
    }

    #[test]
    fn max_channel_value_matches_grid_search() {
        // per channel e(p) = −p·ln(p)/ln C peaks at p = 1/e
        let c = 4;
        let mut best = 0.0f64;
        for i in 1..10_000 {
            let p = i as f64 / 10_000.0;
            best = best.max(-p * p.ln() / (c as f64).ln());
        }
        let analytic = 1.0 / (std::f64::consts::E * (c as f64).ln());
        assert!((best - analytic).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..c * 9).map(|_| rng.random_range(-4.0..4.0)).collect();
            let logits = Tensor::from_vec(raw, (1, c, 3, 3), DEV).unwrap();
            let e = self_information_map(&softmax(&logits, 1).unwrap()).unwrap();
            let max = e.max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(max <= analytic + 1e-9, "max {max} exceeds bound {analytic}");
        }
    }

    #[test]
    fn self_information_zero_iff_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let raw: Vec<f64> = (0..3 * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let probs = softmax(&Tensor::from_vec(raw, (1, 3, 2, 2), DEV).unwrap(), 1).unwrap();
            let e = self_information_map(&probs).unwrap().to_vec1_flat().unwrap();
            let p = probs.to_vec1_flat().unwrap();
            for (ev, pv) in e.iter().zip(&p) {
                let deterministic = *pv < 1e-12 || (*pv - 1.0).abs() < 1e-12;
                assert_eq!(*ev == 0.0, deterministic, "p={pv} e={ev}");
                assert!(*ev >= 0.0);
            }
        }
    }

    fn prob_logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        let x = Tensor::full(prob_logit(0.5), (1, 1, 2, 2), DEV).unwrap();
        for target in [0.0, 1.0] {
            let v = bce_with_logits_const(&x, target)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!((v - std::f64::consts::LN_2).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_discriminator_has_zero_loss() {
        let big = Tensor::full(30.0f64, (1, 1, 2, 2), DEV).unwrap();
        let small = Tensor::full(-30.0f64, (1, 1, 2, 2), DEV).unwrap();
        let v = d_loss(&big, &small, &big, &small)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(v < 1e-10, "loss {v}");
    }

    #[test]
    fn undecided_discriminator_loss_is_two_ln_two_per_branch() {
        let x = Tensor::full(prob_logit(0.5), (2, 1, 3, 3), DEV).unwrap();
        let per_branch = d_loss_branch(&x, &x).unwrap().to_scalar::<f64>().unwrap();
        assert!((per_branch - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
        let both = d_loss(&x, &x, &x, &x).unwrap().to_scalar::<f64>().unwrap();
        assert!((both - 4.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn fooled_discriminator_zeroes_generator_term() {
        let big = Tensor::full(30.0f64, (1, 1, 2, 2), DEV).unwrap();
        let v = g_adv_loss(&big, &big, 0.5).unwrap().to_scalar::<f64>().unwrap();
        assert!(v < 1e-10);
    }

    #[test]
    fn g_adv_decreases_in_target_probability() {
        let mut prev = f64::INFINITY;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let x = Tensor::full(prob_logit(p), (1, 1, 2, 2), DEV).unwrap();
            let v = g_adv_loss(&x, &x, 0.5).unwrap().to_scalar::<f64>().unwrap();
            assert!(v < prev, "not decreasing at p={p}");
            prev = v;
        }
    }

    #[test]
    fn g_adv_weights_aux_branch() {
        let a = Tensor::full(prob_logit(0.3), (1, 1, 1, 1), DEV).unwrap();
        let fooled = Tensor::full(30.0f64, (1, 1, 1, 1), DEV).unwrap();
        let main_only = g_adv_loss(&a, &fooled, 0.5).unwrap().to_scalar::<f64>().unwrap();
        let aux_only = g_adv_loss(&fooled, &a, 0.5).unwrap().to_scalar::<f64>().unwrap();
        assert!((aux_only - 0.5 * main_only).abs() < 1e-9);
    }
}
