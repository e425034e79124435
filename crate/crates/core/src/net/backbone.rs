//! Encoder backbones. All variants emit B×2048×h×w with h = ⌈H/stride⌉.
//!
//! `Tiny` is a 4-stage CNN channel-lifted to 2048 for desk-scale experiments.
//! The ResNet variants follow the bottleneck layout with stride replaced by
//! dilation in the late stages, so the output stride is 8 or 16. All
//! normalization is group norm: it is batch-size independent and keeps
//! training bitwise reproducible without running statistics.

use std::str::FromStr;

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Conv2dCfg, GroupNorm};
use crate::nn::ParamStore;

use super::gn_groups;

pub const FEATURE_CHANNELS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    Tiny,
    ResNet50,
    ResNet101,
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "resnet50" | "resnet50-imagenet" => Ok(Self::ResNet50),
            "resnet101" | "resnet101-imagenet" => Ok(Self::ResNet101),
            other => Err(Error::Config(format!(
                "unknown backbone `{other}` (expected tiny, resnet50, resnet101)"
            ))),
        }
    }
}

impl BackboneKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Tiny => "tiny",
            Self::ResNet50 => "resnet50",
            Self::ResNet101 => "resnet101",
        }
    }
}

fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cfg = Conv2dCfg {
            stride,
            padding: dilation * (kernel / 2),
            dilation,
            bias: false,
            ..Default::default()
        };
        Ok(Self {
            conv: Conv2d::new(ps, name, in_c, out_c, kernel, cfg, rng)?,
            norm: GroupNorm::new(ps, &format!("{name}_gn"), out_c, gn_groups(out_c), rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        relu(&self.norm.forward(&self.conv.forward(x)?)?)
    }
}

struct Tiny {
    stem: ConvBlock,
    stage2: ConvBlock,
    stage3: ConvBlock,
    stage4: ConvBlock,
    lift: ConvBlock,
}

impl Tiny {
    fn new(ps: &mut ParamStore, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        // stride 8 keeps stage4 at unit stride with dilation 2
        let (s4_stride, s4_dil) = if stride == 8 { (1, 2) } else { (2, 1) };
        Ok(Self {
            stem: ConvBlock::new(ps, "backbone.stem", 1, 32, 3, 2, 1, rng)?,
            stage2: ConvBlock::new(ps, "backbone.stage2", 32, 64, 3, 2, 1, rng)?,
            stage3: ConvBlock::new(ps, "backbone.stage3", 64, 128, 3, 2, 1, rng)?,
            stage4: ConvBlock::new(ps, "backbone.stage4", 128, 256, 3, s4_stride, s4_dil, rng)?,
            lift: ConvBlock::new(ps, "backbone.lift", 256, FEATURE_CHANNELS, 1, 1, 1, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.stem.forward(x)?;
        let x = self.stage2.forward(&x)?;
        let x = self.stage3.forward(&x)?;
        let x = self.stage4.forward(&x)?;
        self.lift.forward(&x)
    }
}

struct Bottleneck {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    conv3: Conv2d,
    gn3: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore,
        name: &str,
        in_c: usize,
        mid_c: usize,
        stride: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let out_c = mid_c * 4;
        let plain = Conv2dCfg {
            bias: false,
            ..Default::default()
        };
        let spatial = Conv2dCfg {
            stride,
            padding: dilation,
            dilation,
            bias: false,
            ..Default::default()
        };
        let shortcut = if in_c != out_c || stride != 1 {
            let cfg = Conv2dCfg {
                stride,
                bias: false,
                ..Default::default()
            };
            Some((
                Conv2d::new(ps, &format!("{name}.short"), in_c, out_c, 1, cfg, rng)?,
                GroupNorm::new(ps, &format!("{name}.short_gn"), out_c, gn_groups(out_c), rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), in_c, mid_c, 1, plain, rng)?,
            gn1: GroupNorm::new(ps, &format!("{name}.gn1"), mid_c, gn_groups(mid_c), rng)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), mid_c, mid_c, 3, spatial, rng)?,
            gn2: GroupNorm::new(ps, &format!("{name}.gn2"), mid_c, gn_groups(mid_c), rng)?,
            conv3: Conv2d::new(ps, &format!("{name}.conv3"), mid_c, out_c, 1, plain, rng)?,
            gn3: GroupNorm::new(ps, &format!("{name}.gn3"), out_c, gn_groups(out_c), rng)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = relu(&self.gn1.forward(&self.conv1.forward(x)?)?)?;
        let y = relu(&self.gn2.forward(&self.conv2.forward(&y)?)?)?;
        let y = self.gn3.forward(&self.conv3.forward(&y)?)?;
        let identity = match &self.shortcut {
            Some((conv, gn)) => gn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        relu(&(y + identity)?)
    }
}

struct ResNet {
    stem: Conv2d,
    stem_gn: GroupNorm,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet {
    fn new(
        ps: &mut ParamStore,
        blocks: [usize; 4],
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let stem_cfg = Conv2dCfg {
            stride: 2,
            padding: 3,
            bias: false,
            ..Default::default()
        };
        let stem = Conv2d::new(ps, "backbone.stem", 1, 64, 7, stem_cfg, rng)?;
        let stem_gn = GroupNorm::new(ps, "backbone.stem_gn", 64, gn_groups(64), rng)?;

        // late stages trade stride for dilation to hit the output stride
        let (strides, dilations) = if stride == 8 {
            ([1, 2, 1, 1], [1, 1, 2, 4])
        } else {
            ([1, 2, 2, 1], [1, 1, 1, 2])
        };
        let mids = [64, 128, 256, 512];
        let mut layers = Vec::new();
        let mut in_c = 64;
        for (li, &count) in blocks.iter().enumerate() {
            let mut layer = Vec::new();
            for bi in 0..count {
                let s = if bi == 0 { strides[li] } else { 1 };
                let name = format!("backbone.layer{}.{}", li + 1, bi);
                layer.push(Bottleneck::new(ps, &name, in_c, mids[li], s, dilations[li], rng)?);
                in_c = mids[li] * 4;
            }
            layers.push(layer);
        }
        Ok(Self {
            stem,
            stem_gn,
            layers,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = relu(&self.stem_gn.forward(&self.stem.forward(x)?)?)?;
        // values are non-negative after relu, so a zero pad is neutral for max pooling
        let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut x = x.max_pool2d_with_stride(3, 2)?;
        for layer in &self.layers {
            for block in layer {
                x = block.forward(&x)?;
            }
        }
        Ok(x)
    }
}

enum Body {
    Tiny(Tiny),
    ResNet(ResNet),
}

/// Feature encoder; `forward` maps B×1×H×W to B×2048×⌈H/s⌉×⌈W/s⌉.
pub struct Backbone {
    kind: BackboneKind,
    stride: usize,
    body: Body,
}

impl Backbone {
    pub fn new(
        ps: &mut ParamStore,
        kind: BackboneKind,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if stride != 8 && stride != 16 {
            return Err(Error::Config(format!(
                "output stride {stride} unsupported (expected 8 or 16)"
            )));
        }
        let body = match kind {
            BackboneKind::Tiny => Body::Tiny(Tiny::new(ps, stride, rng)?),
            BackboneKind::ResNet50 => Body::ResNet(ResNet::new(ps, [3, 4, 6, 3], stride, rng)?),
            BackboneKind::ResNet101 => Body::ResNet(ResNet::new(ps, [3, 4, 23, 3], stride, rng)?),
        };
        Ok(Self { kind, stride, body })
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.body {
            Body::Tiny(t) => t.forward(x),
            Body::ResNet(r) => r.forward(x),
        }
    }
}

/// Loads backbone weights from a safetensors file into matching `backbone.*`
/// parameters; returns how many stored tensors were applied.
pub fn load_backbone_weights(ps: &mut ParamStore, path: &std::path::Path) -> Result<usize> {
    let raw = std::fs::read(path)?;
    let st = safetensors::SafeTensors::deserialize(&raw)
        .map_err(|e| Error::Checkpoint(format!("pretrained weights: {e}")))?;
    let mut applied = 0;
    for name in st.names() {
        if !name.starts_with("backbone.") {
            continue;
        }
        let Some(var) = ps.get(name) else { continue };
        let view = st
            .tensor(name)
            .map_err(|e| Error::Checkpoint(format!("pretrained weights `{name}`: {e}")))?;
        let shape: Vec<usize> = view.shape().to_vec();
        if shape != var.as_tensor().dims() {
            return Err(Error::Checkpoint(format!(
                "pretrained `{name}` shape {:?} != model {:?}",
                shape,
                var.as_tensor().dims()
            )));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(data, shape, ps.device())?.to_dtype(ps.dtype())?;
        var.set(&t)?;
        applied += 1;
    }
    Ok(applied)
}
