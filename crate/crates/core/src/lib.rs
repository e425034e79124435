//! Cross-modality segmentation with text-guided adaptation.
//!
//! A labeled source modality trains a text-conditioned segmentation network;
//! an unlabeled target modality is adapted to it through entropy-map
//! adversarial alignment, a vision-language covariance cosine loss, and
//! class-prototype alignment. Includes synthetic phantom data generation,
//! Dice/ASD evaluation, and GradCAM emission for desk-scale experiments.

pub mod adv;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod proto;
pub mod text;
pub mod train;
pub mod types;
pub mod vlcol;

pub use error::{Error, Result};
pub use types::{ImageBatch, LabelBatch, Modality};
