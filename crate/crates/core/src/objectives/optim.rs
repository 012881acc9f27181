use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moments are kept in `f64` whatever the parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub hyper: AdamW,
    pub step: u64,
    pub m: ParamStore<f64>,
    pub v: ParamStore<f64>,
}

impl OptimState {
    pub fn new(hyper: AdamW) -> Self {
        Self {
            hyper,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }
}

/// One decoupled-weight-decay Adam step over every parameter named in
/// `grads`; other parameters are left untouched. `lr_for` gives the learning
/// rate per parameter name.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimState,
    lr_for: impl Fn(&str) -> f64,
) -> Result<()> {
    for (name, g) in &grads.tensors {
        let p = params.get(name)?;
        if p.shape != g.shape {
            return Err(Error::shape(format!("{name}: param {:?} vs grad {:?}", p.shape, g.shape)));
        }
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (name, g) in &grads.tensors {
        let lr = lr_for(name);
        let p = params.get_mut(name)?;
        let m = state.m.tensors.entry(name.clone()).or_insert_with(|| Tensor::zeros(&g.shape));
        let v = state.v.tensors.entry(name.clone()).or_insert_with(|| Tensor::zeros(&g.shape));
        for k in 0..g.data.len() {
            let gk = g.data[k].f64();
            m.data[k] = h.beta1 * m.data[k] + (1.0 - h.beta1) * gk;
            v.data[k] = h.beta2 * v.data[k] + (1.0 - h.beta2) * gk * gk;
            let mh = m.data[k] / c1;
            let vh = v.data[k] / c2;
            let pk = p.data[k].f64();
            p.data[k] = T::c(pk - lr * (mh / (vh.sqrt() + h.eps) + h.weight_decay * pk));
        }
    }
    Ok(())
}

/// Rescale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors
        .values()
        .flat_map(|t| t.data.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::c(max_norm / norm);
        for t in grads.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Linear warmup to `base_lr`, then cosine decay reaching `floor_lr` at the
/// start of the final epoch (`total_epochs - 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: usize,
    pub floor_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            warmup_epochs: 5.0,
            total_epochs: 100,
            floor_lr: 1e-8,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if (self.total_epochs as f64) <= self.warmup_epochs || self.warmup_epochs < 0.0 {
            return Err(Error::config("total_epochs must exceed warmup_epochs"));
        }
        if !(self.base_lr > 0.0) || self.floor_lr < 0.0 || self.floor_lr > self.base_lr {
            return Err(Error::config("need 0 <= floor_lr <= base_lr, base_lr > 0"));
        }
        Ok(())
    }

    /// Learning rate at a fractional epoch position.
    pub fn lr(&self, epoch: f64) -> f64 {
        if epoch <= self.warmup_epochs {
            if self.warmup_epochs == 0.0 {
                return self.base_lr;
            }
            return self.base_lr * epoch.max(0.0) / self.warmup_epochs;
        }
        let last = (self.total_epochs as f64 - 1.0).max(self.warmup_epochs);
        let span = last - self.warmup_epochs;
        let progress = if span > 0.0 {
            ((epoch - self.warmup_epochs) / span).min(1.0)
        } else {
            1.0
        };
        if progress >= 1.0 {
            return self.floor_lr;
        }
        self.floor_lr + 0.5 * (self.base_lr - self.floor_lr) * (1.0 + (PI * progress).cos())
    }
}
