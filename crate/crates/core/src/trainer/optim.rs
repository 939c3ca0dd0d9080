use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    /// Layer-wise adaptive rate scaling on top of momentum SGD.
    Lars,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Lars => "lars",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "sgd_momentum" | "sgd" => Some(OptimizerKind::SgdMomentum),
            "lars" | "adaptive" => Some(OptimizerKind::Lars),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup over the first 5% of steps, then cosine decay to zero.
    CosineWarmup,
    Constant,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::CosineWarmup => "cosine_warmup",
            LrSchedule::Constant => "constant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "cosine_warmup" | "cosine" => Some(LrSchedule::CosineWarmup),
            "constant" => Some(LrSchedule::Constant),
            _ => None,
        }
    }

    /// Learning rate at 0-based `step` of `total` steps.
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::CosineWarmup => {
                let total = total.max(1);
                let warmup = (total as f64 * 0.05).ceil() as usize;
                if step < warmup {
                    base * (step + 1) as f64 / warmup as f64
                } else {
                    let span = (total - warmup).max(1) as f64;
                    let t = ((step - warmup) as f64 / span).min(1.0);
                    base * 0.5 * (1.0 + (PI * t).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSchedule {
    Constant,
    /// `1 − (1 − tau)(cos(π t / T) + 1)/2`, reaching 1 at the last step.
    CosineToOne,
}

impl TauSchedule {
    pub fn name(self) -> &'static str {
        match self {
            TauSchedule::Constant => "constant",
            TauSchedule::CosineToOne => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(TauSchedule::Constant),
            "cosine" => Some(TauSchedule::CosineToOne),
            _ => None,
        }
    }

    pub fn at(self, tau: f64, step: usize, total: usize) -> f64 {
        match self {
            TauSchedule::Constant => tau,
            TauSchedule::CosineToOne => {
                let t = step as f64 / total.max(1) as f64;
                1.0 - (1.0 - tau) * ((PI * t).cos() + 1.0) / 2.0
            }
        }
    }
}

/// LARS trust coefficient.
pub const LARS_ETA: f64 = 1e-3;

/// Momentum SGD (optionally LARS) over a fixed list of parameter stores.
/// Weight decay and LARS scaling skip one-dimensional tensors (biases and
/// batch-norm affine terms).
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T: Scalar> {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64, parts: &[&ParamStore<T>]) -> Self {
        let velocity = parts.iter().map(|p| p.values().iter().map(|v| Tensor::zeros(v.shape())).collect()).collect();
        Optimizer { kind, momentum, weight_decay, velocity }
    }

    pub fn velocity(&self) -> &[Vec<Tensor<T>>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, part: usize, index: usize, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.velocity[part][index];
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!("velocity shape {:?} vs {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    /// One update. `grads[part][i]` is `None` for parameters outside the
    /// loss graph; those are left untouched.
    pub fn step(&mut self, parts: &mut [&mut ParamStore<T>], grads: &[Vec<Option<Tensor<T>>>], lr: f64) -> Result<()> {
        if parts.len() != self.velocity.len() || grads.len() != parts.len() {
            return Err(Error::Structure("optimizer state does not match the parameter stores".into()));
        }
        let m = T::of(self.momentum);
        let lr_t = T::of(lr);
        for ((store, vel), part_grads) in parts.iter_mut().zip(&mut self.velocity).zip(grads) {
            for (i, g) in part_grads.iter().enumerate() {
                let Some(g) = g else { continue };
                let w = &store.values()[i];
                let matrix = w.ndim() > 1;
                let wd = if matrix { self.weight_decay } else { 0.0 };
                let wd_t = T::of(wd);
                let update = if wd > 0.0 { g.zip_map(w, |g, w| g + wd_t * w)? } else { g.clone() };
                let scale = if self.kind == OptimizerKind::Lars && matrix {
                    let wn = w.data().iter().map(|&x| x * x).sum::<T>().sqrt();
                    let un = update.data().iter().map(|&x| x * x).sum::<T>().sqrt();
                    if wn > T::zero() && un > T::zero() {
                        T::of(LARS_ETA) * wn / un
                    } else {
                        T::one()
                    }
                } else {
                    T::one()
                };
                let v = vel[i].zip_map(&update, |v, u| m * v + scale * u)?;
                let new_w = w.zip_map(&v, |w, v| w - lr_t * v)?;
                vel[i] = v;
                store.set(i, new_w)?;
            }
        }
        Ok(())
    }
}
