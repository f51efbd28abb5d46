//! Adam with decoupled weight decay and a linear warmup/decay schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient, scaled by the current learning rate.
    pub weight_decay: f64,
    /// Fraction of the total steps spent ramping the learning rate up from 0.
    pub warmup_frac: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.95,
            warmup_frac: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.warmup_frac);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Learning-rate multiplier schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Linear ramp over the first `warmup` steps, then linear decay to 0 at `total`.
    WarmupLinear { warmup: u64, total: u64 },
}

impl Schedule {
    pub fn warmup_linear(total: u64, warmup_frac: f64) -> Self {
        let warmup = (total as f64 * warmup_frac).round() as u64;
        Schedule::WarmupLinear { warmup, total }
    }

    /// Multiplier for the 1-based step `t`.
    pub fn factor(&self, t: u64) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::WarmupLinear { warmup, total } => {
                if t <= warmup && warmup > 0 {
                    t as f64 / warmup as f64
                } else if total > warmup {
                    ((total.saturating_sub(t)) as f64 / (total - warmup) as f64).clamp(0.0, 1.0)
                } else {
                    1.0
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub schedule: Schedule,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig, schedule: Schedule, store: &ParamStore<F>) -> Self {
        let zeros = |_| -> Vec<Vec<F>> {
            store
                .iter()
                .map(|(_, p)| vec![F::zero(); p.tensor.len()])
                .collect()
        };
        Self {
            config,
            schedule,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.schedule.factor(self.step.max(1))
    }

    /// One bias-corrected update of every parameter holding a gradient.
    /// Parameters without a gradient are left untouched; a store with no
    /// gradients at all is an error.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if !store.iter().any(|(_, p)| p.tensor.requires_grad && p.tensor.grad().is_some()) {
            return Err(Error::MissingGradient(
                "no trainable parameter holds a gradient; run backward first".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let lr = F::of(c.lr * self.schedule.factor(self.step));
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let bc1 = F::of(1.0 - c.beta1.powi(t));
        let bc2 = F::of(1.0 - c.beta2.powi(t));
        let eps = F::of(c.eps);
        let wd = F::of(c.weight_decay);

        for (id, p) in store.iter_mut() {
            if !p.tensor.requires_grad {
                continue;
            }
            let Some(g) = p.tensor.grad().map(<[F]>::to_vec) else {
                continue;
            };
            let decay = p.decay && c.weight_decay > 0.0;
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut update = mhat / (vhat.sqrt() + eps);
                if decay {
                    update = update + wd * *w;
                }
                *w = *w - lr * update;
            }
            if !p.tensor.is_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        Ok(())
    }
}
