//! Adam with per-parameter moment estimates.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: HashMap::new(),
        }
    }

    /// Applies one update to every parameter accepted by `filter` using the
    /// gradients stored in `store`, then zeroes all gradients.
    ///
    /// Nothing is modified if any selected gradient is non-finite.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, filter: impl Fn(&str) -> bool) -> Result<()> {
        for (_, p) in store.iter() {
            if filter(&p.name) && !p.grad.all_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for p in store.params_mut() {
            if !filter(&p.name) {
                continue;
            }
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
                steps: 0,
            });
            st.steps += 1;
            let c1 = 1.0 - beta1.powi(st.steps as i32);
            let c2 = 1.0 - beta2.powi(st.steps as i32);
            let grads = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i].as_f64();
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let update = lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
                *w = T::lit(w.as_f64() - update);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
