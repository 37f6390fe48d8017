//! Adam optimizer over a subset of store parameters.

use super::params::{ParamId, ParamStore};
use ndarray::ArrayD;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    params: Vec<ParamId>,
}

impl Adam {
    pub fn new(params: Vec<ParamId>, lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            params,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.step = t;
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// One update from the gradients currently accumulated in the store.
    /// Frozen (non-trainable) parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = self.lr;
        for &id in &self.params {
            let entry = store.entry_mut(id);
            if !entry.trainable {
                continue;
            }
            if entry.adam_m.is_none() {
                entry.adam_m = Some(ArrayD::zeros(entry.value.raw_dim()));
                entry.adam_v = Some(ArrayD::zeros(entry.value.raw_dim()));
            }
            let m = entry.adam_m.as_mut().unwrap().as_slice_mut().unwrap();
            let v = entry.adam_v.as_mut().unwrap().as_slice_mut().unwrap();
            let g = entry.grad.as_slice().unwrap();
            let p = entry.value.as_slice_mut().unwrap();
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                p[i] -= (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }
}
