//! Adam with bias correction, plus the epoch schedule: a reconstruction-only
//! warmup and a single learning-rate halving.

use crate::error::{Error, Result};
use crate::graph::{ParamId, ParamSet};
use crate::scalar::{num, Scalar};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { m, v, step: 0 }
    }

    /// Moment tensors under a caller-chosen prefix, for checkpointing.
    pub fn entries(&self, params: &ParamSet<T>, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, p) in params.iter().enumerate() {
            out.push((format!("{prefix}.m.{}", p.name), self.m[i].clone()));
            out.push((format!("{prefix}.v.{}", p.name), self.v[i].clone()));
        }
        out
    }

    pub fn load_entries(
        &mut self,
        params: &ParamSet<T>,
        prefix: &str,
        entries: &[(String, Tensor<T>)],
    ) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            for (slot, which) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                let name = format!("{prefix}.{which}.{}", p.name);
                let found = entries
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| Error::invalid("adam_load", format!("missing {name}")))?;
                if found.1.shape() != slot.shape() {
                    return Err(Error::shape("adam_load", slot.shape(), found.1.shape()));
                }
                *slot = found.1.clone();
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every parameter's accumulated grad.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::invalid("adam_step", "state does not mirror the parameter set"));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = num::<T>(ADAM_BETA1);
    let b2 = num::<T>(ADAM_BETA2);
    let one = num::<T>(1.0);
    let bc1 = one - num::<T>(ADAM_BETA1.powi(t));
    let bc2 = one - num::<T>(ADAM_BETA2.powi(t));
    let eps = num::<T>(ADAM_EPS);
    let lr_t = num::<T>(lr);

    for i in 0..params.len() {
        let id = ParamId(i);
        let grad = params.get(id).grad.clone();
        state.m[i] = state.m[i].zip_map(&grad, "adam_m", |m, g| b1 * m + (one - b1) * g)?;
        state.v[i] = state.v[i].zip_map(&grad, "adam_v", |v, g| b2 * v + (one - b2) * g * g)?;
        let update = state.m[i].zip_map(&state.v[i], "adam_u", |m, v| {
            lr_t * (m / bc1) / ((v / bc2).sqrt() + eps)
        })?;
        let next = params.get(id).value.zip_map(&update, "adam_p", |p, u| p - u)?;
        params.set_value(id, next)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// Epochs (1-indexed, inclusive) that train with reconstruction only.
    pub warmup: usize,
    /// Last epoch at the initial rate; later epochs use lr0/2.
    pub halve_at: usize,
    pub lr0: f64,
}

impl TrainSchedule {
    pub fn paper() -> Self {
        TrainSchedule { epochs: 500, warmup: 20, halve_at: 300, lr0: 1e-3 }
    }

    pub fn desk() -> Self {
        TrainSchedule { epochs: 30, warmup: 3, halve_at: 20, lr0: 1e-3 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup < self.halve_at && self.halve_at <= self.epochs) {
            return Err(Error::invalid("train_schedule", "need warmup < halve_at <= epochs"));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::invalid("train_schedule", "lr0 must be positive"));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch <= self.halve_at {
            self.lr0
        } else {
            self.lr0 / 2.0
        }
    }

    pub fn adversarial_active(&self, epoch: usize) -> bool {
        epoch > self.warmup
    }
}
