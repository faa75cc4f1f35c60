//! AdamW with per-parameter step counts, and a warmup + cosine-to-zero
//! learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn finish_step(&mut self) {
        self.step += 1;
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn restore(config: AdamWConfig, step: u64, moments: BTreeMap<String, Moments>) -> Self {
        Self {
            config,
            step,
            moments,
        }
    }

    /// Applies one decoupled-weight-decay Adam update to `param` at rate
    /// `lr` (already scaled by any group multiplier). Weight decay applies
    /// only when `decay` is set.
    pub fn update(&mut self, name: &str, param: &mut [f32], grad: &[f32], lr: f32, decay: bool) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw",
                detail: format!("{name}: {} params vs {} grads", param.len(), grad.len()),
            });
        }
        let c = self.config;
        let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            step: 0,
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        if st.m.len() != param.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw",
                detail: format!("{name}: state for {} params, got {}", st.m.len(), param.len()),
            });
        }
        st.step += 1;
        let t = st.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let shrink = if decay { 1.0 - lr * c.weight_decay } else { 1.0 };
        for i in 0..param.len() {
            let g = grad[i];
            st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
            st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            param[i] = param[i] * shrink - lr * mhat / (vhat.sqrt() + c.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(base: f64, total_steps: usize, warmup_steps: usize) -> Self {
        Self {
            base,
            total_steps,
            warmup_steps,
        }
    }

    /// Linear warmup from 0, then `0.5 * base * (1 + cos(pi * progress))`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::IndexOutOfRange(format!(
                "step {step} beyond schedule of {}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.base * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return Ok(0.0);
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        Ok(0.5 * self.base * (1.0 + (std::f64::consts::PI * progress).cos()).max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = vec![0.5f32, -1.25, 3.0];
        let before = p.clone();
        for _ in 0..10 {
            opt.update("w", &mut p, &[0.0; 3], 1e-2, true).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_decreases_scalar() {
        // Scalar simulation: with g = 1 the bias-corrected step is ~lr each time.
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = vec![1.0f32];
        let mut prev = p[0];
        for _ in 0..200 {
            opt.update("w", &mut p, &[1.0], 1e-3, false).unwrap();
            assert!(p[0] < prev);
            prev = p[0];
        }
        assert!((p[0] - (1.0 - 200.0 * 1e-3)).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch() {
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(opt.update("w", &mut [0.0; 2], &[0.0; 3], 1e-3, true).is_err());
    }

    #[test]
    fn group_multiplier_rate() {
        let s = LrSchedule::new(2e-5, 1000, 0);
        let eff = s.lr_at(0).unwrap() * 0.2;
        assert!((eff - 4e-6).abs() < 1e-18);
    }

    #[test]
    fn cosine_examples() {
        let s = LrSchedule::new(1.0, 100, 0);
        assert_eq!(s.lr_at(0).unwrap(), 1.0);
        assert!((s.lr_at(50).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(s.lr_at(100).unwrap(), 0.0);
        assert!(s.lr_at(101).is_err());
        let w = LrSchedule::new(1.0, 100, 10);
        assert_eq!(w.lr_at(0).unwrap(), 0.0);
        assert!((w.lr_at(5).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(w.lr_at(10).unwrap(), 1.0);
        for step in 0..=100 {
            assert!(w.lr_at(step).unwrap() >= 0.0);
        }
    }
}
