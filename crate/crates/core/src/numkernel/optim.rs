use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamStore, Real};

/// Linear ramp from 0 to the peak over the warmup steps, then a linear decay
/// to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearWarmupDecay {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LinearWarmupDecay {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: u64) -> Self {
        let warmup_steps = (warmup_fraction.clamp(0.0, 1.0) * total_steps as f64).round() as u64;
        Self {
            peak,
            warmup_steps,
            total_steps,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let remaining = (self.total_steps - step) as f64;
        let span = (self.total_steps - self.warmup_steps) as f64;
        self.peak * remaining / span
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
    /// Global-norm gradient clipping; `None` disables it.
    pub max_grad_norm: Option<f64>,
}

impl AdamConfig {
    pub fn new(peak_lr: f64, warmup_fraction: f64, total_steps: u64) -> Self {
        Self {
            peak_lr,
            warmup_fraction,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: None,
        }
    }

    pub fn schedule(&self) -> LinearWarmupDecay {
        LinearWarmupDecay::new(self.peak_lr, self.warmup_fraction, self.total_steps)
    }
}

/// Adam with bias correction, driven by [`LinearWarmupDecay`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| vec![T::zero(); t.numel()])
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn current_lr(&self) -> f64 {
        self.config.schedule().lr(self.step)
    }

    /// Applies one update and advances the step counter. Returns the learning
    /// rate that was used.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>) -> f64 {
        let lr = self.current_lr();
        let clip = match self.config.max_grad_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max && norm > 0.0 {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = (self.step + 1) as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = T::from_f64(1.0 - b1.powi(t));
        let bc2 = T::from_f64(1.0 - b2.powi(t));
        let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
        let one = T::one();
        let eps = T::from_f64(self.config.eps);
        let lr_t = T::from_f64(lr);
        let clip = T::from_f64(clip);
        let decay = T::from_f64(lr * self.config.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                if decay != T::zero() {
                    p[j] -= decay * p[j];
                }
                p[j] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        lr
    }
}
