//! AdamW, the warmup-cosine schedule and global-norm clipping.

use std::f64::consts::PI;

use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

/// Global gradient-norm bound applied before every step.
pub const DEFAULT_CLIP: Real = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
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

/// Moment buffers for every parameter of one store, plus the step counter.
///
/// Frozen parameters keep their moments untouched, so unfreezing later resumes
/// from where they were left.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> (&Tensor, &Tensor) {
        (&self.m[index], &self.v[index])
    }

    /// One AdamW update from the accumulated gradient buffers.
    pub fn step(&mut self, store: &mut ParamStore, lr: Real) {
        // parameters registered after construction get fresh moments
        while self.m.len() < store.len() {
            let shape = store.get(crate::param::ParamId(self.m.len())).value.shape().to_vec();
            self.m.push(Tensor::zeros(&shape));
            self.v.push(Tensor::zeros(&shape));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = p.value.data_mut();
            for (((w, g), m), v) in w.iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup to `peak_lr`, then half-cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, warmup_steps: usize, total_steps: usize, peak_lr: Real) -> Real {
    if step < warmup_steps {
        return peak_lr * step as Real / warmup_steps as Real;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as Real / span as Real).min(1.0);
    peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Scales trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: Real) -> Real {
    let norm = store.trainable_grad_norm();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            if p.trainable {
                p.grad.scale_assign(s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Component;

    fn scalar_store(w: Real, g: Real) -> (ParamStore, crate::param::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Component::Baseline, Tensor::scalar(w));
        store.get_mut(id).grad = Tensor::scalar(g);
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = scalar_store(1.0, 1.0);
        let mut opt = OptimizerState::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.step(&mut store, 0.01);
        // m̂ = v̂ = 1, so the step is lr / (1 + eps)
        let expected = 1.0 - 0.01 / (1.0 + 1e-8);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn decay_only_when_gradient_is_zero() {
        let (mut store, id) = scalar_store(2.0, 0.0);
        let mut opt = OptimizerState::new(
            &store,
            AdamWConfig {
                weight_decay: 0.1,
                ..Default::default()
            },
        );
        opt.step(&mut store, 0.5);
        assert_eq!(store.value(id).data()[0], 2.0 * (1.0 - 0.5 * 0.1));
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let (mut store, id) = scalar_store(0.123456789, 3.0);
        store.set_trainable(id, false);
        let before = store.value(id).clone();
        let mut opt = OptimizerState::new(&store, AdamWConfig::default());
        for _ in 0..5 {
            opt.step(&mut store, 0.1);
        }
        assert!(store.value(id).bit_eq(&before));
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 100, 1e-3), 0.0);
        assert_eq!(cosine_lr(10, 10, 100, 1e-3), 1e-3);
        assert!(cosine_lr(100, 10, 100, 1e-3) <= 1e-12);
        assert!((cosine_lr(55, 10, 100, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let (mut store, _) = scalar_store(1.0, 4.0);
        let before = clip_grad_norm(&mut store, 1.0);
        assert_eq!(before, 4.0);
        assert!((store.trainable_grad_norm() - 1.0).abs() < 1e-12);
    }
}
