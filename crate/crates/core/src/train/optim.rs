//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use crate::error::{Error, Result};
use crate::model::{GradientTape, ModelParams, Tensor};

/// Number of warmup steps for a run of `total_steps` optimizer steps.
pub fn warmup_steps(total_steps: u64, warmup_fraction: f64) -> u64 {
    (warmup_fraction * total_steps as f64).ceil() as u64
}

/// Learning rate applied at 0-based optimizer step `step`: linear ramp from
/// 0 over the warmup steps, then linear decay towards 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64, warmup_fraction: f64) -> f64 {
    let warmup = warmup_steps(total_steps, warmup_fraction);
    if step < warmup {
        base_lr * step as f64 / warmup as f64
    } else if total_steps > warmup {
        base_lr * total_steps.saturating_sub(step) as f64 / (total_steps - warmup) as f64
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update. Gradients are checked for non-finite entries before
/// anything is modified.
pub fn adamw_step(params: &mut ModelParams, grads: &GradientTape, state: &mut OptimizerState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if !grads.matches(params) {
        return Err(Error::Shape("gradient tape does not match parameters".into()));
    }
    let specs = params.config().tensor_specs();
    if let Some(i) = grads.tensors().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            tensor: specs[i].name.clone(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
            *p -= lr * cfg.weight_decay * *p;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(warmup_steps(1000, 0.03), 30);
        assert_eq!(lr_at(0, 1000, 2e-5, 0.03), 0.0);
        assert!((lr_at(15, 1000, 2e-5, 0.03) - 1e-5).abs() < 1e-20);
        assert_eq!(lr_at(30, 1000, 2e-5, 0.03), 2e-5);
        assert!((lr_at(515, 1000, 2e-5, 0.03) - 1e-5).abs() < 1e-20);
        assert_eq!(lr_at(1000, 1000, 2e-5, 0.03), 0.0);
        // Tiny runs still warm up for one step.
        assert_eq!(warmup_steps(4, 0.03), 1);
        assert_eq!(lr_at(0, 4, 1.0, 0.03), 0.0);
        assert_eq!(lr_at(1, 4, 1.0, 0.03), 1.0);
    }

    #[test]
    fn schedule_is_nonnegative_and_bounded() {
        for total in 1..50u64 {
            for s in 0..=total {
                let lr = lr_at(s, total, 3e-4, 0.1);
                assert!((0.0..=3e-4).contains(&lr), "{s}/{total}: {lr}");
            }
        }
    }
}
