//! Adam with a cosine-decayed learning rate.
//!
//! One optimizer instance lives for exactly one task: the schedule runs
//! its half-cosine from `base_lr` down to zero over that task's steps,
//! and moment buffers are keyed by position in the (stable) trainable
//! parameter list.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BASE_LR: f64 = 2e-4;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
    total_steps: usize,
    base_lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl OptimizerState {
    pub fn adam(base_lr: f64, total_steps: usize) -> Result<OptimizerState> {
        if total_steps == 0 {
            return Err(Error::invalid("adam", "total_steps must be > 0"));
        }
        if !(base_lr.is_finite() && base_lr > 0.0) {
            return Err(Error::invalid("adam", format!("bad base_lr {base_lr}")));
        }
        Ok(OptimizerState {
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
            total_steps,
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// lr(step) = base_lr * 0.5 * (1 + cos(pi * step / total)), clamped
    /// past the schedule end.
    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    /// One Adam update over `params`, consuming their accumulated
    /// gradients (which are left in place; call `zero_grads` after).
    /// The learning rate uses the pre-increment step counter, so the
    /// first call runs at full `base_lr`.
    pub fn adam_step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("{} params vs {} moment buffers", params.len(), self.m.len()),
            ));
        }
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (i, p) in params.iter_mut().enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(Error::invalid(
                    "adam_step",
                    format!("param {i} changed size: {} vs {}", p.numel(), self.m[i].len()),
                ));
            }
            let g: Vec<f64> = match p.grad() {
                Some(g) => g.to_vec(),
                None => return Err(Error::MissingGradient { index: i }),
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

pub fn zero_grads(params: &mut [&mut Tensor]) {
    for p in params.iter_mut() {
        p.zero_grad();
    }
}
