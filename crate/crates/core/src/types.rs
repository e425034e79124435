//! Core data-plane types shared across modules.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops;

/// Imaging modality tag; also selects the prompt wording and embedding bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Ct,
    Mri,
    Flair,
    T2,
}

impl Modality {
    pub fn as_prompt_token(&self) -> &'static str {
        match self {
            Modality::Ct => "CT",
            Modality::Mri => "MRI",
            Modality::Flair => "FLAIR",
            Modality::T2 => "T2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CT" => Ok(Modality::Ct),
            "MRI" => Ok(Modality::Mri),
            "FLAIR" => Ok(Modality::Flair),
            "T2" => Ok(Modality::T2),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_prompt_token())
    }
}

/// A batch of single-channel intensity images, B×1×H×W.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub values: Tensor,
    pub modality: Modality,
}

impl ImageBatch {
    pub fn new(values: Tensor, modality: Modality) -> Result<Self> {
        let dims = values.dims();
        if dims.len() != 4 || dims[1] != 1 || dims[0] == 0 {
            return Err(Error::Shape(format!(
                "image batch must be B×1×H×W with B >= 1, got {dims:?}"
            )));
        }
        Ok(Self { values, modality })
    }

    pub fn batch_size(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.values.dims();
        (d[2], d[3])
    }
}

/// Integer class maps, B×H×W, values in [0, C-1] with 0 = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBatch {
    values: Vec<u8>,
    batch: usize,
    height: usize,
    width: usize,
    num_classes: usize,
}

impl LabelBatch {
    pub fn new(
        values: Vec<u8>,
        (batch, height, width): (usize, usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        if values.len() != batch * height * width {
            return Err(Error::Shape(format!(
                "label buffer has {} values, expected {}",
                values.len(),
                batch * height * width
            )));
        }
        if let Some(&bad) = values.iter().find(|&&v| (v as usize) >= num_classes) {
            return Err(Error::LabelOutOfRange {
                value: bad,
                classes: num_classes,
            });
        }
        Ok(Self {
            values,
            batch,
            height,
            width,
            num_classes,
        })
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Classes that appear at least once in the batch, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes];
        for &v in &self.values {
            seen[v as usize] = true;
        }
        (0..self.num_classes).filter(|&c| seen[c]).collect()
    }

    pub fn one_hot(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        ops::one_hot(
            &self.values,
            (self.batch, self.height, self.width),
            self.num_classes,
            dtype,
            device,
        )
    }

    /// Nearest-neighbor downsample to (h, w), half-pixel centers.
    pub fn downsample(&self, h: usize, w: usize) -> LabelBatch {
        let rows = ops::nearest_indices(self.height, h);
        let cols = ops::nearest_indices(self.width, w);
        let mut out = Vec::with_capacity(self.batch * h * w);
        for b in 0..self.batch {
            let base = b * self.height * self.width;
            for &r in &rows {
                for &c in &cols {
                    out.push(self.values[base + r * self.width + c]);
                }
            }
        }
        LabelBatch {
            values: out,
            batch: self.batch,
            height: h,
            width: w,
            num_classes: self.num_classes,
        }
    }
}
