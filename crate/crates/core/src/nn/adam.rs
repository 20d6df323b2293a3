//! Adaptive-moment optimizer.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{GradBuffer, ParamStore};

/// Adam with bias correction. The step count lives in the optimizer so
/// checkpoint/resume keeps the moment estimates bit-exact.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

/// Scalar knobs persisted in checkpoints (moments are stored as tensors).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.zeros_like().grads,
            v: store.zeros_like().grads,
        }
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            t: self.t,
        }
    }

    /// Applies one update with the given learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            let g = &grads.grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let param = store.get_mut(super::ParamId(i));
            ndarray::Zip::from(param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;
    use rand::SeedableRng;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize f(w) = sum(w^2) from a fixed start.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.add_conv_weight("w", ParamGroup::Encoder, 2, 2, 1, 1, &mut rng);
        let mut adam = Adam::new(&store);
        let f = |s: &ParamStore| s.get(id).iter().map(|v| v * v).sum::<f64>();
        let f0 = f(&store);
        for _ in 0..200 {
            let mut grads = store.zeros_like();
            grads.grads[id.0] = store.get(id).mapv(|v| 2.0 * v);
            adam.step(&mut store, &grads, 0.05);
        }
        assert!(f(&store) < 1e-3 * f0.max(1e-9));
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let id = store.add_conv_weight("w", ParamGroup::Encoder, 3, 3, 3, 3, &mut rng);
        let before = store.get(id).clone();
        let mut adam = Adam::new(&store);
        let grads = store.zeros_like();
        adam.step(&mut store, &grads, 0.1);
        assert_eq!(&before, store.get(id));
    }
}
