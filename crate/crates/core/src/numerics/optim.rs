use std::f64::consts::PI;

use super::autodiff::ParamStore;
use super::scalar::{c, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Cosine interpolation from `base` to `end` over `total` steps, then flat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub end: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total == 0 {
            return self.end;
        }
        let progress = step.min(self.total) as f64 / self.total as f64;
        self.end + (self.base - self.end) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
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
            weight_decay: 1e-2,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub schedule: CosineSchedule,
    step: usize,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig, schedule: CosineSchedule) -> Self {
        let first: Vec<Tensor<T>> = params.iter().map(|(_, p)| p.value.zeros_like()).collect();
        Self {
            config,
            schedule,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// Updates applied so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// One update from the gradients currently stored in `params`.
    /// Gradients are left in place for the caller to zero.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        let lr = self.schedule.lr(self.step);
        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (c::<T>(cfg.beta1), c::<T>(cfg.beta2));
        let (one_b1, one_b2) = (c::<T>(1.0 - cfg.beta1), c::<T>(1.0 - cfg.beta2));
        let decay = c::<T>(1.0 - lr * cfg.weight_decay);
        let (lr_t, eps) = (c::<T>(lr), c::<T>(cfg.eps));
        let (bc1, bc2) = (c::<T>(bc1), c::<T>(bc2));
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if m.shape() != p.value.shape() {
                return Err(Error::State(format!("moment shape mismatch for {}", p.name)));
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((w, &g), mi), vi) in value
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> CosineSchedule {
        CosineSchedule {
            base: 1e-3,
            end: 1e-5,
            total: 100,
        }
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = sched();
        assert!((s.lr(0) - 1e-3).abs() < 1e-18);
        assert!((s.lr(100) - 1e-5).abs() < 1e-18);
        assert!((s.lr(50) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert_eq!(s.lr(250), s.lr(100));
        for i in 0..150 {
            assert!(s.lr(i + 1) <= s.lr(i));
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
        let before = store.get(crate::numerics::ParamId(0)).value.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&store, cfg, sched());
        for _ in 0..5 {
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.get(crate::numerics::ParamId(0)).value, before);
    }

    #[test]
    fn single_scalar_step_matches_hand_evaluation() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[1], &[2.0]).unwrap()).unwrap();
        store.get_mut(id).grad = Tensor::from_f64(&[1], &[0.5]).unwrap();
        let mut opt = OptimizerState::new(&store, AdamWConfig::default(), sched());
        opt.step(&mut store).unwrap();
        // m = 0.05, v = 0.00025; m̂ = 0.5, v̂ = 0.25; step = 0.5 / (0.5 + 1e-8)
        let lr = 1e-3;
        let expect = 2.0 * (1.0 - lr * 1e-2) - lr * 0.5 / (0.5 + 1e-8);
        assert!((store.get(id).value.data()[0] - expect).abs() < 1e-12);
        assert_eq!(store.get(id).grad.data(), &[0.5], "gradients are not cleared");
    }
}
