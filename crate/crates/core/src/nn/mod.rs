//! Minimal layer toolkit on top of candle: a named, ordered parameter store
//! with seeded initialization, plus the handful of layers the networks need.

pub mod attention;
pub mod layers;
pub mod ops;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// N(0, sqrt(2 / fan_in)), the ReLU-centric fan-in scaling.
    KaimingNormal { fan_in: usize },
    Normal { std: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Init {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Uniform { lo, hi } => (0..n).map(|_| rng.random_range(lo..hi)).collect(),
        }
    }
}

/// Ordered map of named trainable parameters.
///
/// Initialization is drawn from a caller-supplied ChaCha stream so that a
/// given seed always yields bit-identical parameters, independent of dtype.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates a named parameter and returns a tensor view sharing its storage.
    pub fn var<S: Into<Shape>>(
        &mut self,
        name: &str,
        shape: S,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let shape: Shape = shape.into();
        let data = init.sample(shape.elem_count(), rng);
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let view = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(view)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// All vars whose name starts with one of the prefixes, in name order.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(name, var)| (name.clone(), var.clone()))
            .collect()
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .map(|(name, var)| (name.clone(), var.clone()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.as_tensor().elem_count()).sum()
    }

    /// Overwrites parameter values in place, keeping tensor identities.
    pub fn load_values(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars.iter() {
            let src = values.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter `{name}` in checkpoint"))
            })?;
            if src.dims() != var.as_tensor().dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` shape {:?} != checkpoint shape {:?}",
                    var.as_tensor().dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn export_values(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.vars.iter() {
            out.insert(name.clone(), var.as_tensor().copy()?);
        }
        Ok(out)
    }

    /// Order-stable digest of every parameter's raw bits; used by tests and
    /// the trainer's isolation checks.
    pub fn digest(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, var) in self.vars.iter() {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
            for x in flat.to_vec1::<f64>()? {
                h = (h ^ x.to_bits()).wrapping_mul(0x100000001b3);
            }
        }
        Ok(h)
    }
}
