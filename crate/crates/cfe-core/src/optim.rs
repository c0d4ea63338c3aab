//! Adam optimizer and the warmup/cosine learning-rate schedule.

use crate::layers::ParamSet;

/// Linear warmup from zero to the peak, then cosine decay to zero.
/// The peak scales linearly with the batch size against the 384-image
/// reference recipe, so `base_lr` means "learning rate at batch 384".
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

pub const REFERENCE_BATCH: usize = 384;

impl LrSchedule {
    pub fn new(base_lr: f64, batch_size: usize, warmup_fraction: f64, total_steps: usize) -> Self {
        let peak = base_lr * batch_size as f64 / REFERENCE_BATCH as f64;
        let warmup_steps = (warmup_fraction * total_steps as f64).round() as usize;
        LrSchedule { peak, warmup_steps, total_steps }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with bias correction. State arrays are kept in parameter-registry
/// order, which the checkpoint serializes verbatim.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam {
            beta1,
            beta2,
            eps,
            step_count: 0,
            m: params.items().iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.items().iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    /// One update over every parameter that accumulated a gradient this step
    /// (parameters without a gradient — e.g. an inactive memory bank — keep
    /// their state untouched). Clears gradients afterwards.
    pub fn step(&mut self, params: &ParamSet, lr: f64, clip_norm: Option<f64>) {
        self.step_count += 1;
        let clip_scale = match clip_norm {
            Some(max_norm) => {
                let mut total = 0.0;
                for (_, t) in params.items() {
                    if let Some(g) = t.grad() {
                        total += g.iter().map(|x| x * x).sum::<f64>();
                    }
                }
                let norm = total.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (i, (_, t)) in params.items().iter().enumerate() {
            let Some(g) = t.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = t.to_vec();
            for j in 0..data.len() {
                let gj = g[j] * clip_scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            t.assign(&data);
            t.zero_grad();
        }
    }
}
