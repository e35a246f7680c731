//! Adaptive-moment optimizer (bias-corrected first/second moments).

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 8e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Per-parameter moment state. `t` counts steps applied to this parameter.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(shape: &[usize]) -> Self {
        AdamState { m: Tensor::zeros(shape), v: Tensor::zeros(shape), t: 0 }
    }

    pub fn step(&mut self, param: &mut Tensor<S>, grad: &Tensor<S>, cfg: &AdamConfig) {
        debug_assert_eq!(param.shape(), grad.shape());
        self.t += 1;
        let b1 = S::from_f64(cfg.beta1);
        let b2 = S::from_f64(cfg.beta2);
        let one = S::one();
        let lr = S::from_f64(cfg.lr);
        let eps = S::from_f64(cfg.eps);
        let bc1 = S::from_f64(1.0 - cfg.beta1.powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - cfg.beta2.powi(self.t as i32));
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        let p = param.data_mut();
        let g = grad.data();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
