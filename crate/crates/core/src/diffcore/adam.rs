use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter in a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParameterStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update of every parameter, then zero the gradients.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        ensure!(
            self.first.len() == store.len(),
            "optimizer tracks {} parameters, store has {}",
            self.first.len(),
            store.len()
        );
        for id in store.ids() {
            ensure!(
                store.grad(id).shape() == self.first[id.index()].shape(),
                "no gradient slot of shape {:?} for parameter {:?}",
                self.first[id.index()].shape(),
                store.name(id)
            );
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let grad = store.grad(id).clone();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for k in 0..p.len() {
                let g = grad.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
