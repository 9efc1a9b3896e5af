use std::f64::consts::PI;

use crate::error::{Error, Result};

/// `eta_min + ½ (lr0 − eta_min)(1 + cos(π · step / total_steps))`
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, eta_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} is past total_steps {total_steps}")));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (PI * progress).cos()))
}
