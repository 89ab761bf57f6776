//! Adam and the warmup / inverse-square-root learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            peak: 1e-4,
            floor: 2e-5,
            warmup: 500,
        }
    }
}

impl LrSchedule {
    /// Fresh schedule for the second pre-training stage and fine-tuning.
    pub fn reduced() -> Self {
        LrSchedule {
            peak: 1e-5,
            floor: 2e-6,
            warmup: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.peak >= self.floor && self.peak.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates need peak >= floor > 0, got peak {} floor {}",
                self.peak, self.floor
            )));
        }
        Ok(())
    }

    /// `clamp(peak · min(step/warmup, √(warmup/step)), floor, peak)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup.max(1) as f64;
        let factor = (step / warmup).min((warmup / step).sqrt());
        (self.peak * factor).clamp(self.floor, self.peak)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value().numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update at `rate`. Frozen parameters and parameters
    /// without a gradient are left alone; a non-finite gradient aborts the
    /// step before anything changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, rate: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Optimizer(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if !grads.is_finite() {
            return Err(Error::Optimizer("non-finite gradient; step skipped".into()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for id in 0..params.len() {
            if !params.get(id).trainable() {
                continue;
            }
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            match grads.get(id) {
                Some(g) => {
                    let w = params.value_mut(id).data_mut();
                    for i in 0..g.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        w[i] -= rate * mh / (vh.sqrt() + eps);
                    }
                }
                None => {
                    // Zero gradient: moments decay, and the weight moves only
                    // if earlier momentum remains.
                    if m.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let w = params.value_mut(id).data_mut();
                    for i in 0..m.len() {
                        m[i] *= beta1;
                        v[i] *= beta2;
                        w[i] -= rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
