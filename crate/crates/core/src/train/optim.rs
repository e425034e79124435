//! Optimizers over named parameter groups: SGD with momentum, weight decay,
//! and polynomial learning-rate decay, plus Adam. Both expose their state as
//! named tensors so checkpoints can resume bitwise.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

/// SGD with heavyball momentum, decoupled-from-nothing L2 weight decay
/// (added to the gradient), and polynomial decay of the learning rate:
/// lr(k) = base * (1 - k/total)^power.
pub struct SgdMomentum {
    base_lr: f64,
    momentum: f64,
    weight_decay: f64,
    poly_power: f64,
    total_steps: usize,
    velocity: BTreeMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(
        base_lr: f64,
        momentum: f64,
        weight_decay: f64,
        poly_power: f64,
        total_steps: usize,
    ) -> Self {
        SgdMomentum {
            base_lr,
            momentum,
            weight_decay,
            poly_power,
            total_steps: total_steps.max(1),
            velocity: BTreeMap::new(),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = (step as f64 / self.total_steps as f64).clamp(0.0, 1.0);
        self.base_lr * (1.0 - frac).powf(self.poly_power)
    }

    /// One update over the given parameters; parameters without a gradient
    /// keep their value and velocity.
    pub fn step(
        &mut self,
        params: &[(String, Var)],
        grads: &GradStore,
        step: usize,
    ) -> Result<()> {
        let lr = self.lr_at(step);
        for (name, var) in params {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let grad = if self.weight_decay != 0.0 {
                (grad + (var.as_tensor() * self.weight_decay)?)?
            } else {
                grad.clone()
            };
            // Stored detached: state must not keep whole step graphs alive.
            let velocity = match self.velocity.get(name) {
                Some(v) => ((v * self.momentum)? + &grad)?,
                None => grad,
            }
            .detach();
            var.set(&(var.as_tensor() - (&velocity * lr)?)?)?;
            self.velocity.insert(name.clone(), velocity);
        }
        Ok(())
    }

    pub fn export_state(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) -> Result<()> {
        for (name, v) in &self.velocity {
            out.insert(format!("{prefix}{name}"), v.copy()?);
        }
        Ok(())
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) {
        self.velocity.clear();
        for (name, t) in tensors {
            if let Some(stripped) = name.strip_prefix(prefix) {
                self.velocity.insert(stripped.to_string(), t.clone());
            }
        }
    }
}

/// Adam with bias correction; no weight decay.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in params {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Stored detached: state must not keep whole step graphs alive.
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (grad * (1.0 - self.beta1))?)?,
                None => (grad * (1.0 - self.beta1))?,
            }
            .detach();
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?,
                None => (grad.sqr()? * (1.0 - self.beta2))?,
            }
            .detach();
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let denom = (v_hat.sqrt()? + self.eps)?;
            let update = ((m_hat / denom)? * self.lr)?;
            var.set(&(var.as_tensor() - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn export_state(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in &self.m {
            out.insert(format!("{prefix}m.{name}"), t.copy()?);
        }
        for (name, t) in &self.v {
            out.insert(format!("{prefix}v.{name}"), t.copy()?);
        }
        Ok(())
    }

    pub fn load_state(
        &mut self,
        prefix: &str,
        t: usize,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.t = t;
        self.m.clear();
        self.v.clear();
        let m_prefix = format!("{prefix}m.");
        let v_prefix = format!("{prefix}v.");
        for (name, tensor) in tensors {
            if let Some(stripped) = name.strip_prefix(&m_prefix) {
                self.m.insert(stripped.to_string(), tensor.clone());
            } else if let Some(stripped) = name.strip_prefix(&v_prefix) {
                self.v.insert(stripped.to_string(), tensor.clone());
            }
        }
        if self.t > 0 && self.m.is_empty() {
            return Err(Error::Checkpoint(
                "adam state claims prior steps but has no moment tensors".into(),
            ));
        }
        Ok(())
    }
}
