//! AdamW and the warm-up + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::nn::layers::{Module, Param};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    /// Step at which the decay reaches `floor`; 0 lets the trainer use the
    /// length of the whole run.
    pub total_steps: usize,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak: 2e-4,
            warmup_steps: 100,
            total_steps: 0,
            floor: 2e-6,
        }
    }
}

impl LrSchedule {
    /// Linear ramp from 0 to `peak` over the warm-up, then cosine decay to `floor`.
    pub fn rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps || self.total_steps <= self.warmup_steps {
            return self.floor;
        }
        let frac = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 10.0,
        }
    }
}

/// First and second moment estimates, one pair per parameter in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

pub fn grad_norm<T: Scalar>(module: &impl Module<T>) -> f64 {
    let mut s = 0.0;
    module.visit(&mut |p: &Param<T>| {
        s += p.grad.data().iter().map(|g| g.f64() * g.f64()).sum::<f64>();
    });
    s.sqrt()
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, module: &impl Module<T>) -> Self {
        let mut m = Vec::new();
        module.visit(&mut |p: &Param<T>| m.push(Tensor::zeros(p.value.shape())));
        let v = m.clone();
        Self { cfg, step: 0, m, v }
    }

    /// Applies one update with learning rate `lr` and returns the pre-clip gradient norm.
    pub fn update(&mut self, module: &mut impl Module<T>, lr: f64) -> f64 {
        let norm = grad_norm(module);
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = T::of(1.0 - lr * self.cfg.weight_decay);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (c1, c2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (lr_t, eps) = (T::of(lr / bc1), T::of(self.cfg.eps));
        let bc2_sqrt = T::of(bc2.sqrt());
        let clip = T::of(clip);
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut(&mut |p: &mut Param<T>| {
            let m = ms[k].data_mut();
            let v = vs[k].data_mut();
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * clip;
                *mi = b1t * *mi + c1 * g;
                *vi = b2t * *vi + c2 * g * g;
                *w = *w * decay - lr_t * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
            k += 1;
        });
        norm
    }
}
