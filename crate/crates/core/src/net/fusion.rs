//! Text-vision fusion: a pooled global visual vector is fused with projected
//! class text, refined by single-token multi-head attention, and condensed
//! by a controller into per-sample 1×1 convolution parameters that produce
//! the main segmentation logits.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::attention::MultiHeadAttention;
use crate::nn::layers::{Conv2d, Conv2dCfg, GroupNorm, Linear};
use crate::nn::ops::{softmax, upsample_bilinear};
use crate::nn::{Init, ParamStore};

use super::backbone::FEATURE_CHANNELS;
use super::gn_groups;
use super::neck::SEM_CHANNELS;

/// Input channels of the dynamic convolution (width of F_sem).
pub const DYN_IN: usize = SEM_CHANNELS;
/// Output channels of the dynamic convolution.
pub const DYN_OUT: usize = 128;
/// Controller output width: 256·128 weights plus 128 biases.
pub const THETA_LEN: usize = DYN_IN * DYN_OUT + DYN_OUT;

pub const FUSION_DIM: usize = 256;
const MHA_HEADS: usize = 4;

/// Per-sample dynamic convolution parameters, a partition of θ.
pub struct DynamicParams {
    pub theta: Tensor,
    weight: Tensor,
    bias: Tensor,
}

impl DynamicParams {
    pub fn from_theta(theta: Tensor) -> Result<Self> {
        let (b, width) = theta.dims2()?;
        if width != THETA_LEN {
            return Err(Error::Shape(format!(
                "theta width {width}, expected {THETA_LEN}"
            )));
        }
        let weight = theta
            .narrow(1, 0, DYN_IN * DYN_OUT)?
            .reshape((b, DYN_OUT, DYN_IN, 1, 1))?;
        let bias = theta.narrow(1, DYN_IN * DYN_OUT, DYN_OUT)?;
        Ok(Self {
            theta,
            weight,
            bias,
        })
    }

    /// B×128×256×1×1 kernel stack.
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// B×128 bias stack.
    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

pub struct FusionHead {
    global_norm: GroupNorm,
    global_conv: Conv2d,
    fuse: Linear,
    mha: MultiHeadAttention,
    refine1: Linear,
    refine2: Linear,
    ctrl_hidden: Linear,
    ctrl_out: Linear,
    seg: Conv2d,
    num_classes: usize,
}

impl FusionHead {
    pub fn new(ps: &mut ParamStore, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            global_norm: GroupNorm::new(
                ps,
                "fusion.global_gn",
                FEATURE_CHANNELS,
                gn_groups(FEATURE_CHANNELS),
                rng,
            )?,
            global_conv: Conv2d::new(
                ps,
                "fusion.global_conv",
                FEATURE_CHANNELS,
                FUSION_DIM,
                1,
                Conv2dCfg::default(),
                rng,
            )?,
            fuse: Linear::new(ps, "fusion.fuse", 2 * FUSION_DIM, FUSION_DIM, rng)?,
            mha: MultiHeadAttention::new(ps, "fusion.mha", FUSION_DIM, MHA_HEADS, rng)?,
            refine1: Linear::new(ps, "fusion.refine1", FUSION_DIM, FUSION_DIM, rng)?,
            refine2: Linear::new(ps, "fusion.refine2", FUSION_DIM, FUSION_DIM, rng)?,
            ctrl_hidden: Linear::new(ps, "fusion.ctrl_hidden", FUSION_DIM, FUSION_DIM, rng)?,
            // small init keeps the dynamic kernels near zero at start
            ctrl_out: Linear::new_with_init(
                ps,
                "fusion.ctrl_out",
                FUSION_DIM,
                THETA_LEN,
                Init::Normal { std: 0.01 },
                rng,
            )?,
            seg: Conv2d::new_with_init(
                ps,
                "seg_head.conv",
                DYN_OUT,
                num_classes,
                1,
                Conv2dCfg::default(),
                Init::Normal { std: 0.01 },
                rng,
            )?,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// GAP → group norm → 1×1 conv → B×1×256.
    pub fn global_visual_vector(&self, f_high: &Tensor) -> Result<Tensor> {
        let (b, _, _, _) = f_high.dims4()?;
        let pooled = f_high.mean_keepdim(3)?.mean_keepdim(2)?;
        let normed = self.global_norm.forward(&pooled)?;
        let projected = self.global_conv.forward(&normed)?;
        Ok(projected.reshape((b, 1, FUSION_DIM))?)
    }

    /// Concatenate the repeated global vector with each class-text row and
    /// fuse: ReLU(Linear([f_g ∥ t_class])), B×C×256.
    pub fn fuse_query(&self, f_g: &Tensor, t_class: &Tensor) -> Result<Tensor> {
        let (b, one, d) = f_g.dims3()?;
        if one != 1 || d != FUSION_DIM {
            return Err(Error::Shape(format!(
                "f_g is {:?}, expected ({b}, 1, {FUSION_DIM})",
                f_g.dims()
            )));
        }
        let (c, td) = t_class.dims2()?;
        if td != FUSION_DIM {
            return Err(Error::Config(format!(
                "t_class feature width {td} != fusion width {FUSION_DIM}"
            )));
        }
        let f_rep = f_g.broadcast_as((b, c, d))?.contiguous()?;
        let text = t_class
            .reshape((1, c, FUSION_DIM))?
            .broadcast_as((b, c, FUSION_DIM))?
            .contiguous()?;
        let joint = Tensor::cat(&[&f_rep, &text], 2)?;
        Ok(self.fuse.forward(&joint)?.relu()?)
    }

    /// MHA(Q_fused, f_g, f_g) followed by a residual-free two-layer MLP.
    ///
    /// The queries re-enter through the usual residual around the attention;
    /// without it a single key/value token would make the output independent
    /// of Q_fused entirely (softmax over one element is constant 1).
    pub fn attend(&self, q_fused: &Tensor, f_g: &Tensor) -> Result<Tensor> {
        let attended = (q_fused + self.mha.forward(q_fused, f_g, f_g)?)?;
        let hidden = self.refine1.forward(&attended)?.relu()?;
        self.refine2.forward(&hidden)
    }

    /// Mean over the class axis, then the controller MLP; θ has width
    /// `THETA_LEN` and splits into kernels and biases.
    pub fn controller(&self, f_fused: &Tensor) -> Result<DynamicParams> {
        let summary = f_fused.mean(1)?;
        let hidden = self.ctrl_hidden.forward(&summary)?.relu()?;
        let theta = self.ctrl_out.forward(&hidden)?;
        DynamicParams::from_theta(theta)
    }

    /// Per-sample 1×1 convolution of F_sem with the predicted kernels.
    pub fn dynamic_conv(&self, f_sem: &Tensor, params: &DynamicParams) -> Result<Tensor> {
        let (b, c, h, w) = f_sem.dims4()?;
        if c != DYN_IN {
            return Err(Error::Shape(format!(
                "dynamic conv input has {c} channels, expected {DYN_IN}"
            )));
        }
        let flat = f_sem.reshape((b, c, h * w))?;
        let kernels = params.weight().reshape((b, DYN_OUT, DYN_IN))?.contiguous()?;
        let out = kernels.matmul(&flat.contiguous()?)?;
        let bias = params.bias().reshape((b, DYN_OUT, 1))?;
        let out = out.broadcast_add(&bias)?;
        Ok(out.reshape((b, DYN_OUT, h, w))?)
    }

    /// 1×1 classifier over f_conv, upsampled to the requested resolution.
    pub fn seg_head(&self, f_conv: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let logits = self.seg.forward(f_conv)?;
        upsample_bilinear(&logits, out_h, out_w)
    }

    pub fn probs(&self, logits: &Tensor) -> Result<Tensor> {
        softmax(logits, 1)
    }
}
