//! Adam with additive weight decay, global-norm clipping and a plateau
//! learning-rate schedule.

use num_traits::Float;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Moment buffers and step count, one buffer pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`. Non-finite gradients abort the step
    /// before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Length {
                what: "gradients",
                expected: params.len(),
                found: grads.len(),
            });
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape {
                    kernel: "adam",
                    left: params.get(id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: params.name(id).into(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - Float::powi(c.beta1, self.step as i32));
        let bc2 = T::lit(1.0 - Float::powi(c.beta2, self.step as i32));
        let (lr, eps, wd) = (T::lit(c.lr), T::lit(c.eps), T::lit(c.weight_decay));
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * (mh / (vh.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    Float::sqrt(grads.iter().map(Tensor::sum_squares).sum::<f64>())
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Multiplies the learning rate by `factor` once validation has failed to
/// improve for `patience` consecutive checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub best: Option<f64>,
    pub since_improvement: u32,
    pub patience: u32,
    pub factor: f64,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        PlateauSchedule {
            best: None,
            since_improvement: 0,
            patience: 2,
            factor: 0.1,
        }
    }
}

impl PlateauSchedule {
    /// Records a validation metric (lower is better) and returns the
    /// learning rate to use from now on.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        match self.best {
            Some(b) if metric >= b => {
                self.since_improvement += 1;
                if self.since_improvement >= self.patience {
                    self.since_improvement = 0;
                    return lr * self.factor;
                }
                lr
            }
            _ => {
                self.best = Some(metric);
                self.since_improvement = 0;
                lr
            }
        }
    }
}
