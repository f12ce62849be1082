//! Adam optimizer and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment accumulators with bias correction.
#[derive(Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for id in store.ids() {
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
    }
}

/// Learning-rate schedule, evaluated per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        base: f64,
    },
    /// Multiply by `factor` every `period` epochs.
    StepDecay {
        base: f64,
        factor: f64,
        period: usize,
    },
    /// Cosine decay from `base` to `min` over `total` epochs.
    Cosine {
        base: f64,
        min: f64,
        total: usize,
    },
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant { base } => *base,
            LrSchedule::StepDecay {
                base,
                factor,
                period,
            } => base * factor.powi((epoch / period) as i32),
            LrSchedule::Cosine { base, min, total } => {
                let t = (epoch.min(*total)) as f64 / (*total).max(1) as f64;
                min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}
