//! AdamW with decoupled weight decay and a linear-warmup cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 2e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamWConfig,
}

impl AdamWState {
    pub fn new(len: usize, config: AdamWConfig) -> Self {
        AdamWState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }
}

/// One AdamW update in place.
///
/// ```text
/// theta <- theta * (1 - lr * wd)
/// m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
/// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
/// ```
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::arg(format!(
            "adamw shape mismatch: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::arg(format!("learning rate {lr} must be finite and >= 0")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient at index {i}")));
    }
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powf(state.t as f64);
    let bc2 = 1.0 - beta2.powf(state.t as f64);
    let decay = 1.0 - lr * weight_decay;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *p *= decay;
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub warmup_lr: f64,
    pub base_lr: f64,
    pub final_lr: f64,
}

impl CosineSchedule {
    pub const DEFAULT_WARMUP_LR: f64 = 2e-7;
    pub const DEFAULT_BASE_LR: f64 = 2e-5;

    pub fn new(warmup_steps: u64, total_steps: u64, warmup_lr: f64, base_lr: f64, final_lr: f64) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::arg(format!(
                "warmup_steps {warmup_steps} must be below total_steps {total_steps}"
            )));
        }
        if [warmup_lr, base_lr, final_lr].iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::arg("learning rates must be finite and >= 0"));
        }
        Ok(CosineSchedule {
            warmup_steps,
            total_steps,
            warmup_lr,
            base_lr,
            final_lr,
        })
    }

    /// Default rates with the given step counts.
    pub fn with_defaults(warmup_steps: u64, total_steps: u64) -> Result<Self> {
        Self::new(warmup_steps, total_steps, Self::DEFAULT_WARMUP_LR, Self::DEFAULT_BASE_LR, 0.0)
    }
}

/// Learning rate at `step`: linear warmup, then half-cosine down to `final_lr`
/// reached exactly at `total_steps - 1`.
pub fn lr_at(s: &CosineSchedule, step: u64) -> Result<f64> {
    if step >= s.total_steps {
        return Err(Error::arg(format!("step {step} beyond schedule of {} steps", s.total_steps)));
    }
    if step < s.warmup_steps {
        let frac = step as f64 / s.warmup_steps as f64;
        return Ok(s.warmup_lr + (s.base_lr - s.warmup_lr) * frac);
    }
    let span = s.total_steps - s.warmup_steps - 1;
    let progress = if span == 0 {
        0.0
    } else {
        (step - s.warmup_steps) as f64 / span as f64
    };
    Ok(s.final_lr + 0.5 * (s.base_lr - s.final_lr) * (1.0 + (PI * progress).cos()))
}
