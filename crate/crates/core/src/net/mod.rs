//! Segmentation network: encoder backbone, semantic neck, atrous auxiliary
//! classifier, text-vision fusion head with a dynamic convolution, and the
//! patch discriminators used for adversarial alignment.

pub mod backbone;
pub mod discriminator;
pub mod fusion;
pub mod neck;
pub mod segmenter;

pub use backbone::{Backbone, BackboneKind};
pub use discriminator::PatchDiscriminator;
pub use fusion::{DynamicParams, FusionHead, DYN_IN, DYN_OUT, THETA_LEN};
pub use neck::{AtrousAuxHead, SemanticNeck, SEM_CHANNELS};
pub use segmenter::{SegForward, SegNetwork, SegNetworkCfg};

/// Channel width of the encoder's high-level feature map.
pub const HIGH_CHANNELS: usize = 2048;

/// Group count for group normalization at a given channel width.
pub(crate) fn gn_groups(channels: usize) -> usize {
    if channels >= 256 && channels % 32 == 0 {
        32
    } else if channels % 8 == 0 {
        8
    } else {
        1
    }
}
