use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient for `{name}` has shape {grad:?}, parameter has {param:?}")]
    ShapeMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("parameter store is frozen")]
    Frozen,
}

/// Adam hyperparameters plus a step-decay learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiply the learning rate by `decay_factor` every this many steps (0 disables).
    pub decay_every: u64,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay_every: 0, decay_factor: 0.1 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct OptimState<T> {
    config: AdamConfig,
    lr: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, lr: config.lr, step: 0, moments: BTreeMap::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Gradients for names outside `params` are ignored.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimState<T>,
) -> Result<(), OptimError> {
    if params.is_frozen() {
        return Err(OptimError::Frozen);
    }
    for (name, g) in grads {
        if let Some(p) = params.get(name) {
            if p.shape() != g.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: name.clone(),
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let cfg = state.config;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let step_size = T::from_f64_lossy(state.lr / bc1);
    let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
    let eps = T::from_f64_lossy(cfg.eps);
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else { continue };
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); g.numel()], vec![T::zero(); g.numel()]));
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
        }
    }
    if cfg.decay_every > 0 && state.step.is_multiple_of(cfg.decay_every) {
        state.lr *= cfg.decay_factor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[2], v));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = store(0.7);
        let mut st = OptimState::new(AdamConfig::default());
        let grads: Gradients<f64> = [("w".to_string(), Tensor::zeros(&[2]))].into();
        for _ in 0..5 {
            adam_step(&mut p, &grads, &mut st).unwrap();
        }
        assert_eq!(p, store(0.7));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store(1.0);
        let mut st = OptimState::new(AdamConfig::with_lr(1e-4));
        let grads: Gradients<f64> = [("w".to_string(), Tensor::full(&[2], 1.0))].into();
        adam_step(&mut p, &grads, &mut st).unwrap();
        // m̂ = 1, v̂ = 1: delta = lr / (1 + eps)
        let want = 1.0 - 1e-4 / (1.0 + 1e-8);
        for &v in p.get("w").unwrap().data() {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn learning_rate_decays_by_ten() {
        let cfg = AdamConfig { decay_every: 3, ..AdamConfig::with_lr(1e-4) };
        let mut st = OptimState::<f64>::new(cfg);
        let mut p = store(0.0);
        let grads: Gradients<f64> = [("w".to_string(), Tensor::full(&[2], 0.5))].into();
        for _ in 0..2 {
            adam_step(&mut p, &grads, &mut st).unwrap();
        }
        assert_eq!(st.lr(), 1e-4);
        adam_step(&mut p, &grads, &mut st).unwrap();
        assert!((st.lr() - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn rejects_bad_shapes_and_frozen_stores() {
        let mut p = store(0.0);
        let mut st = OptimState::new(AdamConfig::default());
        let grads: Gradients<f64> = [("w".to_string(), Tensor::zeros(&[3]))].into();
        assert!(matches!(adam_step(&mut p, &grads, &mut st), Err(OptimError::ShapeMismatch { .. })));
        p.freeze();
        assert_eq!(adam_step(&mut p, &Gradients::new(), &mut st), Err(OptimError::Frozen));
    }
}
