//! Adaptive-moment descent with bias correction.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`, or
    /// `None` for frozen parameters (which are left untouched).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&Tensor>]) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), true);
        store.push("frozen", Tensor::new(vec![1], vec![3.0]).unwrap(), false);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let g = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let gf = Tensor::new(vec![1], vec![1.0]).unwrap();
        opt.step(&mut store, &[Some(&g), Some(&gf)]);
        let w = store.get(0).value.data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-10);
        assert_eq!(store.get(1).value.data(), &[3.0]);
    }
}
