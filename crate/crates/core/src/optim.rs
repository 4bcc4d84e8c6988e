//! AdamW with decoupled weight decay, plus the linear warm-up / cosine
//! decay schedule used by all training runs.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::Tensor;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Per-parameter first/second moment state, keyed by tensor name.
#[derive(Debug, Default)]
pub struct AdamW {
    cfg: AdamWConfig,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        if cfg.lr <= 0.0 {
            return Err(Error::InvalidLearningRate(cfg.lr));
        }
        Ok(AdamW { cfg, moments: HashMap::new(), step: 0 })
    }

    /// Advances the shared step counter; call once per optimization step
    /// before updating the step's parameters.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Decoupled-decay Adam update of one tensor. `lr_scale` multiplies
    /// the base learning rate (the schedule factor).
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr_scale: f64) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::LengthMismatch { expected: param.len(), got: grad.len() });
        }
        let (m, v) = self
            .moments
            .entry(name.to_owned())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let lr = self.cfg.lr * lr_scale;
        let t = self.step.max(1) as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);
        for i in 0..param.data.len() {
            let g = grad.data[i];
            m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
            v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            // Decay is decoupled from the adaptive step.
            param.data[i] -= lr * self.cfg.weight_decay * param.data[i];
            param.data[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
        Ok(())
    }
}

/// Linear warm-up to the base rate, then cosine decay to zero.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Schedule factor in [0, 1] for 0-based step `t`.
    pub fn factor(&self, t: u64) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        if t < self.warmup_steps {
            return (t + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (t - self.warmup_steps) as f64 / span;
        0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_keeps_params() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut p = Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let before = p.clone();
        opt.begin_step();
        opt.update("w", &mut p, &Tensor::zeros(1, 3), 1.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // With g = 1 and bias correction, step 1 moves by lr/(1 + eps').
        let cfg = AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut p = Tensor::scalar(0.0);
        opt.begin_step();
        opt.update("w", &mut p, &Tensor::scalar(1.0), 1.0).unwrap();
        assert!((p.data[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut p = Tensor::scalar(2.0);
        opt.begin_step();
        opt.update("w", &mut p, &Tensor::scalar(0.0), 1.0).unwrap();
        // Shrinks by lr * wd * p = 0.1 * 0.5 * 2 = 0.1; no adaptive term.
        assert!((p.data[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        assert!(AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() }).is_err());
        assert!(AdamW::new(AdamWConfig { lr: -1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule { warmup_steps: 10, total_steps: 100 };
        assert!((s.factor(0) - 0.1).abs() < 1e-12);
        assert!((s.factor(9) - 1.0).abs() < 1e-12);
        assert!(s.factor(50) < 1.0);
        assert!(s.factor(99) < s.factor(50));
        assert!(s.factor(99) >= 0.0);
    }
}
