//! AdamW: Adam with decoupled weight decay.
//!
//! θ ← θ − lr · ( m̂ / (√v̂ + ε) + λ · θ )

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// Moment estimates for every parameter of one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        let zeros = |p: &ParamSet<T>| p.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        Ok(Self {
            config,
            step: 0,
            first: zeros(params),
            second: zeros(params),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Shape {
                op: "adamw_step",
                detail: format!("state for {} params, got {}", self.first.len(), params.len()),
            });
        }
        let (names, values, grads) = params.split_mut();
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else {
                return Err(Error::Shape {
                    op: "adamw_step",
                    detail: format!("missing gradient for `{}`", names[id]),
                });
            };
            if g.shape() != values[id].shape() || self.first[id].shape() != values[id].shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    detail: format!("shape drift for `{}`", names[id]),
                });
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::cast_from(c.beta1);
        let b2 = T::cast_from(c.beta2);
        let bc1 = T::cast_from(1.0 - c.beta1.powi(t));
        let bc2 = T::cast_from(1.0 - c.beta2.powi(t));
        let lr = T::cast_from(c.learning_rate);
        let wd = T::cast_from(c.weight_decay);
        let eps = T::cast_from(c.epsilon);
        let one = T::one();

        for (id, g) in grads.iter().enumerate() {
            let g = g.as_ref().expect("checked above").data();
            let p = values[id].data_mut();
            let m = self.first[id].data_mut();
            let v = self.second[id].data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[j]);
            }
        }
        Ok(())
    }
}
