//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::PAD;
use crate::model::{ModelParams, EMBEDDING};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter '{0}'")]
    NonFinite(String),
    #[error("gradient for '{name}' has shape {grad:?}, parameter has {param:?}")]
    Shape {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("gradient for unknown parameter '{0}'")]
    Unknown(String),
}

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

/// One AdamW update of `p` in place. `step` is the 1-based step count
/// after this update.
pub fn adamw_update<T: Real>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], step: u64, cfg: &AdamWConfig) {
    let one = T::one();
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let c1 = one - b1.powi(step as i32);
    let c2 = one - b2.powi(step as i32);
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let wd = T::from_f64(cfg.weight_decay);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] = p[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
    }
}

/// Applies one step to every parameter that has a gradient. Parameters
/// without one (frozen) are left alone. The PAD row of the embedding table
/// is never touched. All gradients are checked before anything changes.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<(), OptimError> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| OptimError::Unknown(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(OptimError::Shape {
                name: name.clone(),
                grad: g.shape().to_vec(),
                param: p.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(OptimError::NonFinite(name.clone()));
        }
    }
    state.step += 1;
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let start = if name == EMBEDDING { (PAD + 1) * p.shape()[1] } else { 0 };
        adamw_update(
            &mut p.data_mut()[start..],
            &g.data()[start..],
            &mut m[start..],
            &mut v[start..],
            state.step,
            cfg,
        );
    }
    Ok(())
}
