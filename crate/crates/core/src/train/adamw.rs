use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tensor};
use crate::error::{Error, Result};
use crate::fusion::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
        }
    }
}

/// One AdamW update of a single tensor, in place. `step` counts from 1.
///
/// Decay is decoupled and applied first: `p -= lr·wd·p`, then
/// `p -= lr · m̂ / (√v̂ + eps)` with bias-corrected moments.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<E: Element>(
    param: &mut [E],
    grad: &[E],
    m: &mut [E],
    v: &mut [E],
    step: u64,
    lr: f64,
    decay: bool,
    cfg: &AdamWConfig,
) {
    let f = E::from_f64_lossy;
    let (b1, b2) = (f(cfg.beta1), f(cfg.beta2));
    let bc1 = f(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = f(1.0 - cfg.beta2.powi(step as i32));
    let (lr_e, eps) = (f(lr), f(cfg.eps));
    let shrink = f(lr * cfg.weight_decay);
    for i in 0..param.len() {
        if decay {
            param[i] = param[i] - shrink * param[i];
        }
        let g = grad[i];
        m[i] = b1 * m[i] + (E::one() - b1) * g;
        v[i] = b2 * v[i] + (E::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] = param[i] - lr_e * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state for a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. Parameters whose gradient is `None` are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor<f32>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adamw", format!("{} grads for {} params", grads.len(), params.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape("adamw", format!("gradient shape mismatch for `{}`", p.name)));
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient { name: p.name.clone() });
                }
            }
        }
        self.step += 1;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(i);
            adamw_update(
                p.value.data_mut(),
                g.data(),
                &mut self.m[i],
                &mut self.v[i],
                self.step,
                lr,
                p.decay,
                &self.config,
            );
        }
        Ok(())
    }
}
