//! Semantic neck (2048 → 256 channels) and the dilated auxiliary classifier.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::layers::{Conv2d, Conv2dCfg, GroupNorm};
use crate::nn::{Init, ParamStore};

use super::gn_groups;

pub const SEM_CHANNELS: usize = 256;

struct Stage {
    conv: Conv2d,
    norm: GroupNorm,
}

impl Stage {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cfg = Conv2dCfg {
            bias: false,
            ..Default::default()
        };
        Ok(Self {
            conv: Conv2d::new(ps, name, in_c, out_c, 1, cfg, rng)?,
            norm: GroupNorm::new(ps, &format!("{name}_gn"), out_c, gn_groups(out_c), rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

/// Channel-reduction stack 2048 → 1024 → 512 → 256, resolution preserved.
pub struct SemanticNeck {
    stages: [Stage; 3],
}

impl SemanticNeck {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            stages: [
                Stage::new(ps, "neck.reduce1", 2048, 1024, rng)?,
                Stage::new(ps, "neck.reduce2", 1024, 512, rng)?,
                Stage::new(ps, "neck.reduce3", 512, SEM_CHANNELS, rng)?,
            ],
        })
    }

    pub fn forward(&self, f_high: &Tensor) -> Result<Tensor> {
        let mut x = f_high.clone();
        for stage in &self.stages {
            x = stage.forward(&x)?;
        }
        Ok(x)
    }
}

/// Dilation rates of the four parallel classifier branches.
pub const AUX_DILATIONS: [usize; 4] = [6, 12, 18, 24];

/// Multi-scale auxiliary classifier: four dilated 3×3 branches, summed.
pub struct AtrousAuxHead {
    branches: Vec<Conv2d>,
}

impl AtrousAuxHead {
    pub fn new(ps: &mut ParamStore, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut branches = Vec::new();
        for (i, &d) in AUX_DILATIONS.iter().enumerate() {
            let cfg = Conv2dCfg {
                padding: d,
                dilation: d,
                ..Default::default()
            };
            branches.push(Conv2d::new_with_init(
                ps,
                &format!("aux_head.branch{i}"),
                SEM_CHANNELS,
                num_classes,
                3,
                cfg,
                Init::Normal { std: 0.01 },
                rng,
            )?);
        }
        Ok(Self { branches })
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn forward(&self, f_sem: &Tensor) -> Result<Tensor> {
        let mut sum = self.branches[0].forward(f_sem)?;
        for branch in &self.branches[1..] {
            sum = (sum + branch.forward(f_sem)?)?;
        }
        Ok(sum)
    }
}
