//! AdamW with decoupled weight decay and linear warmup into a constant
//! learning rate.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::tensor::Scalar;
use crate::model::{Grads, Params};

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps of linear warmup before the constant schedule.
    pub warmup_steps: usize,
}

impl AdamWConfig {
    pub fn new(lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 100,
        }
    }

    /// Effective learning rate at a 1-based step: lr * min(1, step/warmup).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// First/second moment tensors mirroring the parameter layout, plus the step
/// counter.
pub struct OptimizerState<T: Scalar> {
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
    pub step: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Params<T>) -> OptimizerState<T> {
        let mut m = Vec::new();
        params.for_each(|_, t| m.push(Array2::zeros(t.dim())));
        let v = m.clone();
        OptimizerState { m, v, step: 0 }
    }

    /// One AdamW update; returns the effective learning rate used.
    pub fn apply(
        &mut self,
        cfg: &AdamWConfig,
        params: &mut Params<T>,
        grads: &Grads<T>,
    ) -> Result<f64> {
        if grads.tensors.len() != self.m.len() {
            return Err(Error::Shape("gradient count does not match optimizer state".into()));
        }
        for g in &grads.tensors {
            if g.iter().any(|x| !x.is_finite_val()) {
                return Err(Error::numeric("adamw", "non-finite gradient"));
            }
        }
        self.step += 1;
        let lr = cfg.lr_at(self.step);
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one = T::from_f64(1.0);
        let eps = T::from_f64(cfg.eps);
        let bc1 = T::from_f64(1.0 - cfg.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - cfg.beta2.powi(self.step as i32));
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(cfg.weight_decay);

        let mut idx = 0;
        params.for_each_mut(|_, t| {
            let g = &grads.tensors[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((p, &gi), (mi, vi)) in
                t.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p = *p - lr_t * (mhat / (vhat.sqrt() + eps) + wd * *p);
            }
            idx += 1;
        });
        Ok(lr)
    }
}
