use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    /// Per-group learning rates overriding `lr`.
    #[serde(default)]
    pub group_lr: BTreeMap<String, f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            group_lr: BTreeMap::new(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn group(mut self, name: &str, lr: f64) -> Self {
        self.group_lr.insert(name.to_string(), lr);
        self
    }

    pub fn lr_for(&self, group: &str) -> f64 {
        self.group_lr.get(group).copied().unwrap_or(self.lr)
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-4)
    }
}

/// Adaptive-moment optimizer with bias correction.
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (tb1, tb2, eps) = (T::c(b1), T::c(b2), T::c(self.config.eps));
        let wd = T::c(self.config.weight_decay);
        for (id, g) in grads {
            let param = store.get_mut(*id);
            if !param.trainable {
                continue;
            }
            let lr = self.config.lr_for(&param.group);
            let step_size = T::c(lr * bc2.sqrt() / bc1);
            let (m, v) = self.moments.entry(*id).or_insert_with(|| {
                (
                    Tensor::zeros(param.value.shape()),
                    Tensor::zeros(param.value.shape()),
                )
            });
            let value = param.value.data_mut();
            for (((w, &gv), mv), vv) in value
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv + wd * *w;
                *mv = tb1 * *mv + (T::one() - tb1) * gv;
                *vv = tb2 * *vv + (T::one() - tb2) * gv * gv;
                *w = *w - step_size * *mv / (vv.sqrt() + eps);
            }
        }
    }
}

/// Plain gradient descent, used where a deterministic closed-form update is
/// easier to reason about (e.g. logistic regression).
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: T) {
    for (id, g) in grads {
        let p = store.get_mut(*id);
        if !p.trainable {
            continue;
        }
        for (w, &gv) in p.value.data_mut().iter_mut().zip(g.data()) {
            *w = *w - lr * gv;
        }
    }
}
