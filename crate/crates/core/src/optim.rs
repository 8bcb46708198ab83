//! Adam with decoupled weight decay and a linear warm-up schedule.

use crate::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Learning rate for 1-based `step`: linear ramp over `warmup` steps, then
/// constant at `base`.
pub fn warmup_lr(base: f64, warmup: usize, step: usize) -> f64 {
    if warmup > 0 && step < warmup {
        base * step as f64 / warmup as f64
    } else {
        base
    }
}

/// First and second moment estimates for one parameter set.
///
/// Weight decay skips one-dimensional tensors (biases and normalization
/// scales).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    decay: Vec<bool>,
    steps: u32,
}

impl AdamW {
    pub fn new<P: Parameters>(params: &P, config: AdamWConfig) -> Self {
        let tensors = params.tensors();
        Self {
            config,
            first: tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            second: tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            decay: tensors.iter().map(|t| t.shape.len() > 1).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn update<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.steps += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let correct1 = 1.0 - beta1.powi(self.steps as i32);
        let correct2 = 1.0 - beta2.powi(self.steps as i32);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
        for (i, (values, grad)) in tensors.enumerate() {
            let decay = if self.decay[i] { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..values.len() {
                let g = grad.data[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / correct1;
                let v_hat = v[j] / correct2;
                values[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * values[j]);
            }
        }
    }
}
