//! Decoupled-weight-decay Adam with linear warmup and linear decay.

use crate::numerics::{Element, ParamStore};

/// Learning rate that ramps linearly from zero over `warmup_steps`, then
/// decays linearly to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LinearSchedule {
    /// Warmup covering `warmup_frac` of `total_steps` (at least one step).
    pub fn with_warmup_fraction(peak: f64, total_steps: u64, warmup_frac: f64) -> Self {
        let warmup_steps = ((total_steps as f64 * warmup_frac).round() as u64).max(1);
        Self {
            peak,
            warmup_steps,
            total_steps,
        }
    }

    /// Rate for the update that follows `step` completed updates.
    pub fn rate(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let total = self.total_steps.max(self.warmup_steps + 1);
        let left = total.saturating_sub(step) as f64;
        self.peak * left / (total - self.warmup_steps) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the whole gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// Biases, layer-norm parameters and embedding norms are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.ends_with(".g"))
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamW {
    pub fn new<T: Element>(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = |i: usize| vec![0.0; params.tensor(i).numel()];
        Self {
            config,
            m: (0..params.len()).map(zeros).collect(),
            v: (0..params.len()).map(zeros).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients at rate `lr`, then
    /// clears them. Parameters without a gradient are left untouched.
    /// Returns the pre-clipping global gradient norm.
    pub fn step<T: Element>(&mut self, params: &mut ParamStore<T>, lr: f64) -> f64 {
        let c = self.config;
        let sq: f64 = (0..params.len())
            .filter_map(|i| params.tensor(i).grad())
            .flat_map(|g| g.iter().map(|v| v.to_f64().powi(2)))
            .sum();
        let norm = sq.sqrt();
        let scale = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let decay = if decays(params.name(i)) {
                c.weight_decay
            } else {
                0.0
            };
            let (data, grad) = params.tensor_mut(i).parts_mut();
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grad[j].to_f64() * scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                let w = data[j].to_f64();
                data[j] = T::from_f64(w - lr * (update + decay * w));
            }
        }
        params.zero_grads();
        norm
    }
}
