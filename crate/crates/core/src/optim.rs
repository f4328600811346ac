//! SGD with momentum and decoupled-from-norm weight decay, and the cosine
//! learning-rate schedule.

use crate::params::ParamStore;
use crate::tensor::Tensor5D;

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·epoch/epochs))`.
pub fn cosine_lr(lr_max: f64, lr_min: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return lr_max;
    }
    let phase = std::f64::consts::PI * epoch as f64 / epochs as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

/// Hyper-parameters of one SGD step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one per parameter, created lazily.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// `v ← μv + (g + λθ)`, `θ ← θ − lr·v`; λ is zero for parameters whose
    /// `decay` flag is off.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor5D], cfg: SgdConfig) {
        if self.velocity.len() != store.params.len() {
            self.velocity = store.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        for ((p, g), v) in store.params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let wd = if p.decay { cfg.weight_decay } else { 0.0 };
            for ((theta, &g), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *v = cfg.momentum * *v + g + wd * *theta;
                *theta -= cfg.lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.025, 0.0, 0, 40), 0.025);
        assert!(cosine_lr(0.025, 0.0, 40, 40).abs() < 1e-18);
        assert!((cosine_lr(0.1, 0.0, 20, 40) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn one_step_on_half_square() {
        let mut store = ParamStore::new();
        store.add("x", Tensor5D::scalar(1.0), true);
        let grad = vec![Tensor5D::scalar(1.0)];
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        Sgd::new().step(&mut store, &grad, cfg);
        assert!((store.params[0].value.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn norm_params_skip_decay() {
        let mut store = ParamStore::new();
        store.add_norm("bn", 1);
        let zero = vec![Tensor5D::vector(vec![0.0]); 2];
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.5,
        };
        let before = store.clone();
        Sgd::new().step(&mut store, &zero, cfg);
        assert_eq!(store, before);
    }
}
