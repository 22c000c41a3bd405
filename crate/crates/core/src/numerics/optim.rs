use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Linear warmup from `max_lr / 100`, then cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(max_lr: f64, warmup_fraction: f64, total_steps: u64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_fraction).round() as u64;
        Self {
            max_lr,
            min_lr: 0.0,
            warmup_steps,
            total_steps: total_steps.max(1),
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let start = self.max_lr / 100.0;
        if step < self.warmup_steps {
            return start + (self.max_lr - start) * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (PI * t).cos())
    }
}

/// Adam with per-parameter moments and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub schedule: LrSchedule,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(schedule: LrSchedule) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            schedule,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// Moments as `adam.m/{name}` and `adam.v/{name}` entries, for resuming.
    pub fn export_moments(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("adam.m/{name}"), Tensor::row(m.clone()));
            out.insert(format!("adam.v/{name}"), Tensor::row(v.clone()));
        }
        out
    }

    /// Rebuilds the optimizer at `step` from [`Adam::export_moments`] output.
    pub fn restore(schedule: LrSchedule, step: u64, moments: &ParamStore) -> Result<Self> {
        let mut opt = Self::new(schedule);
        opt.step = step;
        for (key, t) in moments.iter() {
            if let Some(name) = key.strip_prefix("adam.m/") {
                let v = moments
                    .get(&format!("adam.v/{name}"))
                    .ok_or_else(|| Error::Format(format!("missing second moment for `{name}`")))?;
                opt.moments.insert(name.to_string(), (t.data().to_vec(), v.data().to_vec()));
            }
        }
        Ok(opt)
    }

    /// Applies one update. Frozen entries are never touched; gradients for
    /// names that are frozen or absent from the store are rejected.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<f64> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            if params.is_frozen(name) {
                return Err(Error::Invalid(format!("gradient supplied for frozen `{name}`")));
            }
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let clip = match self.clip_norm {
            Some(max) => {
                let norm = grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let lr = self.schedule.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(lr)
    }
}
