//! Fully-convolutional patch discriminator over self-information maps.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::layers::{Conv2d, Conv2dCfg};
use crate::nn::ops::leaky_relu;
use crate::nn::{Init, ParamStore};

const WIDTHS: [usize; 4] = [64, 128, 256, 512];
const LEAKY_SLOPE: f64 = 0.2;

/// C → 64 → 128 → 256 → 512 → 1, all 4×4 stride-2 convs with leaky-ReLU
/// between; emits a patch logit map at 1/32 resolution.
pub struct PatchDiscriminator {
    convs: Vec<Conv2d>,
}

impl PatchDiscriminator {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cfg = Conv2dCfg {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        let mut convs = Vec::new();
        let mut c_in = in_channels;
        for (i, &c_out) in WIDTHS.iter().enumerate() {
            convs.push(Conv2d::new_with_init(
                ps,
                &format!("{prefix}.conv{i}"),
                c_in,
                c_out,
                4,
                cfg,
                Init::Normal { std: 0.02 },
                rng,
            )?);
            c_in = c_out;
        }
        convs.push(Conv2d::new_with_init(
            ps,
            &format!("{prefix}.classify"),
            c_in,
            1,
            4,
            cfg,
            Init::Normal { std: 0.02 },
            rng,
        )?);
        Ok(Self { convs })
    }

    /// Patch logits B×1×⌈H/32⌉×⌈W/32⌉.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(&y)?;
            if i != last {
                y = leaky_relu(&y, LEAKY_SLOPE)?;
            }
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    #[test]
    fn patch_logit_shape() {
        let mut ps = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = PatchDiscriminator::new(&mut ps, "disc_main", 5, &mut rng).unwrap();
        let x = Tensor::randn(0f32, 1f32, (4, 5, 256, 256), &Device::Cpu).unwrap();
        assert_eq!(d.forward(&x).unwrap().dims(), &[4, 1, 8, 8]);
        let small = Tensor::randn(0f32, 1f32, (2, 5, 64, 64), &Device::Cpu).unwrap();
        assert_eq!(d.forward(&small).unwrap().dims(), &[2, 1, 2, 2]);
    }

    #[test]
    fn two_discriminators_are_independent() {
        let mut ps = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d_main = PatchDiscriminator::new(&mut ps, "disc_main", 3, &mut rng).unwrap();
        let _d_aux = PatchDiscriminator::new(&mut ps, "disc_aux", 3, &mut rng).unwrap();
        let x = Tensor::randn(0f32, 1f32, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let before = d_main
            .forward(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        // zero out the aux discriminator entirely
        for (name, var) in ps.vars_with_prefix(&["disc_aux."]) {
            let zeros = var.as_tensor().zeros_like().unwrap();
            var.set(&zeros).unwrap();
            let _ = name;
        }
        let after = d_main
            .forward(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_input_is_finite() {
        let mut ps = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = PatchDiscriminator::new(&mut ps, "disc_main", 5, &mut rng).unwrap();
        let x = Tensor::zeros((1, 5, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let y = d.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }
}
