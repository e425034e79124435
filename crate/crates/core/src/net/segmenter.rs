//! Full text-conditioned segmentation network and its forward record.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::text::TextProjection;

use super::backbone::{Backbone, BackboneKind};
use super::fusion::{DynamicParams, FusionHead};
use super::neck::{AtrousAuxHead, SemanticNeck};

/// Parameter-name prefixes updated by the SGD optimizer.
pub const SGD_PREFIXES: [&str; 4] = ["backbone.", "neck.", "aux_head.", "seg_head."];
/// Parameter-name prefixes updated by the Adam optimizer.
pub const ADAM_PREFIXES: [&str; 2] = ["fusion.", "text_proj."];

#[derive(Clone, Debug)]
pub struct SegNetworkCfg {
    pub backbone: BackboneKind,
    pub output_stride: usize,
    pub num_classes: usize,
    pub text_dim: usize,
}

/// Activations of one forward pass, kept for the loss terms that tap them.
pub struct SegForward {
    /// B×2048×h×w encoder features.
    pub f_high: Tensor,
    /// B×256×h×w semantic features.
    pub f_sem: Tensor,
    /// B×C×h×w auxiliary logits.
    pub f_aux: Tensor,
    /// B×1×256 pooled global vector.
    pub f_g: Tensor,
    /// B×C×256 attended class queries.
    pub f_fused: Tensor,
    /// B×128×h×w dynamically convolved features.
    pub f_conv: Tensor,
    /// B×C×H×W main logits at input resolution.
    pub logits: Tensor,
    /// Softmax of `logits`.
    pub probs: Tensor,
    /// C×256 projected class text used for this pass.
    pub t_class: Tensor,
}

pub struct SegNetwork {
    pub backbone: Backbone,
    pub neck: SemanticNeck,
    pub aux_head: AtrousAuxHead,
    pub fusion: FusionHead,
    pub text_proj: TextProjection,
    cfg: SegNetworkCfg,
}

impl SegNetwork {
    pub fn new(ps: &mut ParamStore, cfg: SegNetworkCfg, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                cfg.num_classes
            )));
        }
        Ok(Self {
            backbone: Backbone::new(ps, cfg.backbone, cfg.output_stride, rng)?,
            neck: SemanticNeck::new(ps, rng)?,
            aux_head: AtrousAuxHead::new(ps, cfg.num_classes, rng)?,
            fusion: FusionHead::new(ps, cfg.num_classes, rng)?,
            text_proj: TextProjection::new(ps, cfg.text_dim, rng)?,
            cfg,
        })
    }

    pub fn cfg(&self) -> &SegNetworkCfg {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    /// Projects a C×d embedding bank to the C×256 class-text matrix.
    pub fn project_text(&self, bank: &Tensor) -> Result<Tensor> {
        let t = self.text_proj.forward(bank)?;
        let (c, _) = t.dims2()?;
        if c != self.cfg.num_classes {
            return Err(Error::Config(format!(
                "bank has {c} classes, network expects {}",
                self.cfg.num_classes
            )));
        }
        Ok(t)
    }

    /// Full forward pass from images and projected class text.
    pub fn forward(&self, images: &Tensor, t_class: &Tensor) -> Result<SegForward> {
        let (_, _, in_h, in_w) = images.dims4()?;
        let f_high = self.backbone.forward(images)?;
        self.forward_from_features(f_high, t_class, in_h, in_w)
    }

    /// Forward continuation from encoder features; lets callers splice in a
    /// detached activation (activation-gradient probes reuse this).
    pub fn forward_from_features(
        &self,
        f_high: Tensor,
        t_class: &Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<SegForward> {
        let f_sem = self.neck.forward(&f_high)?;
        self.forward_from_semantic(f_high, f_sem, t_class, out_h, out_w)
    }

    pub fn forward_from_semantic(
        &self,
        f_high: Tensor,
        f_sem: Tensor,
        t_class: &Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<SegForward> {
        let f_aux = self.aux_head.forward(&f_sem)?;
        let f_g = self.fusion.global_visual_vector(&f_high)?;
        let q_fused = self.fusion.fuse_query(&f_g, t_class)?;
        let f_fused = self.fusion.attend(&q_fused, &f_g)?;
        let params = self.fusion.controller(&f_fused)?;
        let f_conv = self.fusion.dynamic_conv(&f_sem, &params)?;
        self.finish(f_high, f_sem, f_aux, f_g, f_fused, f_conv, t_class, out_h, out_w)
    }

    /// Final classifier and softmax from a (possibly spliced) f_conv.
    #[allow(clippy::too_many_arguments)]
    pub fn finish(
        &self,
        f_high: Tensor,
        f_sem: Tensor,
        f_aux: Tensor,
        f_g: Tensor,
        f_fused: Tensor,
        f_conv: Tensor,
        t_class: &Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<SegForward> {
        let logits = self.fusion.seg_head(&f_conv, out_h, out_w)?;
        let probs = self.fusion.probs(&logits)?;
        Ok(SegForward {
            f_high,
            f_sem,
            f_aux,
            f_g,
            f_fused,
            f_conv,
            logits,
            probs,
            t_class: t_class.clone(),
        })
    }

    /// Dynamic parameters for a fused representation; exposed for probes.
    pub fn dynamic_params(&self, f_fused: &Tensor) -> Result<DynamicParams> {
        self.fusion.controller(f_fused)
    }
}
