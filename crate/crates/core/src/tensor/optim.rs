//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};

pub trait Optimizer {
    /// Applies one update to every parameter from its stored gradient.
    fn step(&mut self, params: &mut ParamStore);
    fn lr(&self) -> f32;
    fn set_lr(&mut self, lr: f32);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let m: Vec<Vec<f32>> = params.ids().map(|id| vec![0.0; params.value(id).numel()]).collect();
        AdamW { config, step: 0, v: m.clone(), m }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Update a single flat parameter buffer. Exposed for callers that keep
    /// parameters outside a [`ParamStore`].
    pub fn update_slice(
        config: &AdamWConfig,
        step: u64,
        value: &mut [f32],
        grad: &[f32],
        m: &mut [f32],
        v: &mut [f32],
    ) {
        let c = config;
        let bc1 = 1.0 - c.beta1.powi(step as i32);
        let bc2 = 1.0 - c.beta2.powi(step as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            value[i] = value[i] * decay - c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let (value, grad) = params.value_and_grad(id);
            AdamW::update_slice(&self.config, self.step, value, grad, &mut self.m[id.0], &mut self.v[id.0]);
        }
    }

    fn lr(&self) -> f32 {
        self.config.lr
    }

    fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }
}

/// AdaGrad with per-element accumulated squared gradients.
#[derive(Debug, Clone)]
pub struct AdaGrad {
    pub lr: f32,
    pub initial_accumulator: f32,
    step: u64,
    accum: Vec<Vec<f32>>,
}

impl AdaGrad {
    pub fn new(lr: f32, initial_accumulator: f32, params: &ParamStore) -> Self {
        AdaGrad {
            lr,
            initial_accumulator,
            step: 0,
            accum: params.ids().map(|id| vec![initial_accumulator; params.value(id).numel()]).collect(),
        }
    }

    /// One AdaGrad update of a single element; `accum` is updated after the
    /// step, matching the reference GloVe trainer.
    #[inline]
    pub fn update_scalar(lr: f32, value: &mut f32, grad: f32, accum: &mut f32) {
        *value -= lr * grad / accum.sqrt();
        *accum += grad * grad;
    }
}

impl Optimizer for AdaGrad {
    fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let (value, grad) = params.value_and_grad(id);
            let acc = &mut self.accum[id.0];
            for i in 0..value.len() {
                AdaGrad::update_scalar(self.lr, &mut value[i], grad[i], &mut acc[i]);
            }
        }
    }

    fn lr(&self) -> f32 {
        self.lr
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }
}

/// Learning-rate schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Multiply by `factor` once the metric has failed to improve for more
    /// than `patience` consecutive epochs.
    Plateau {
        lr: f32,
        factor: f32,
        patience: usize,
        /// Relative improvement needed to reset the counter.
        threshold: f32,
        #[serde(default)]
        best: Option<f32>,
        #[serde(default)]
        bad_epochs: usize,
    },
    /// Linear warmup from 0 to `lr_max`, then cosine decay to `lr_min` at
    /// `total_steps`.
    CosineWarmup {
        lr_max: f32,
        lr_min: f32,
        warmup_steps: usize,
        total_steps: usize,
    },
    Constant {
        lr: f32,
    },
}

impl LrSchedule {
    pub fn plateau(lr: f32, factor: f32, patience: usize) -> Self {
        LrSchedule::Plateau { lr, factor, patience, threshold: 1e-4, best: None, bad_epochs: 0 }
    }

    pub fn cosine_warmup(lr_max: f32, lr_min: f32, warmup_steps: usize, total_steps: usize) -> Self {
        LrSchedule::CosineWarmup { lr_max, lr_min, warmup_steps, total_steps }
    }

    /// Feed one epoch-end metric (plateau only); returns the new rate.
    pub fn observe(&mut self, metric: f32) -> f32 {
        if let LrSchedule::Plateau { lr, factor, patience, threshold, best, bad_epochs } = self {
            let improved = match *best {
                None => true,
                Some(b) => metric < b - threshold.abs() * b.abs(),
            };
            if improved {
                *best = Some(metric);
                *bad_epochs = 0;
            } else {
                *bad_epochs += 1;
                if *bad_epochs > *patience {
                    *lr *= *factor;
                    *bad_epochs = 0;
                }
            }
        }
        self.lr_at(0)
    }

    /// Rate at optimizer step `step` (ignored by plateau and constant).
    pub fn lr_at(&self, step: usize) -> f32 {
        match *self {
            LrSchedule::Plateau { lr, .. } | LrSchedule::Constant { lr } => lr,
            LrSchedule::CosineWarmup { lr_max, lr_min, warmup_steps, total_steps } => {
                if step < warmup_steps {
                    lr_max * step as f32 / warmup_steps as f32
                } else if step >= total_steps {
                    lr_min
                } else {
                    let span = (total_steps - warmup_steps).max(1) as f64;
                    let progress = (step - warmup_steps) as f64 / span;
                    let c = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                    (lr_min as f64 + (lr_max - lr_min) as f64 * c) as f32
                }
            }
        }
    }

    pub fn is_per_step(&self) -> bool {
        matches!(self, LrSchedule::CosineWarmup { .. })
    }
}
