//! Adam with decoupled weight decay.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::params::{ParamGrads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Frozen parameters are never touched, whatever `grads` contains.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        let c = self.cfg;
        for (id, grad) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let n = grad.numel();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - math::powi(c.beta1, st.t as i32);
            let bc2 = 1.0 - math::powi(c.beta2, st.t as i32);
            let w = store.value_mut(id).data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                w[i] -= c.lr * (mhat / (math::sqrt(vhat) + c.eps) + c.weight_decay * w[i]);
            }
        }
    }
}
