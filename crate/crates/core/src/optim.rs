//! SGD with momentum and L2 weight decay, plus the learning-rate schedule.

use std::collections::HashMap;

use crate::param::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamId, Vec<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[T]> {
        self.velocity.get(&id).map(Vec::as_slice)
    }

    pub fn velocity_count(&self) -> usize {
        self.velocity.len()
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step_with_lr(store, self.learning_rate);
    }

    /// `v ← momentum·v + g + λ·w; w ← w − lr·v` for every trainable weight
    /// holding a gradient, with `λ = weight_decay` for matrices and 0 for
    /// vectors (biases, norm gains). Everything else is left untouched.
    pub fn step_with_lr(&mut self, store: &mut ParamStore<T>, lr: f64) {
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        let ids: Vec<ParamId> = store
            .weights()
            .filter(|(_, p)| p.trainable() && p.tensor.grad().is_some())
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let tensor = store.tensor_mut(id);
            let wd = if tensor.shape().len() >= 2 { wd } else { T::zero() };
            let grad = tensor.grad().expect("filtered").to_vec();
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((w, vi), g) in tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = mu * *vi + *g + wd * *w;
                *w -= lr * *vi;
            }
        }
    }
}

/// Constant learning rate after a linear warmup.
#[derive(Clone, Copy, Debug)]
pub struct WarmupConstant {
    pub base_lr: f64,
    pub warmup_steps: usize,
}

impl WarmupConstant {
    /// Warmup covers `fraction` of `total_steps` (rounded up when non-zero).
    pub fn new(base_lr: f64, total_steps: usize, fraction: f64) -> Self {
        let warmup_steps = (total_steps as f64 * fraction).ceil() as usize;
        Self {
            base_lr,
            warmup_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.base_lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.base_lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(w: f64, g: f64, trainable: bool) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[1], w)).unwrap();
        s.set_trainable(id, true);
        s.tensor_mut(id).accumulate_grad(&[g]).unwrap();
        s.set_trainable(id, trainable);
        (s, id)
    }

    #[test]
    fn plain_step() {
        let (mut s, id) = store_with(1.0, 2.0, true);
        let mut opt = SgdState::new(0.1, 0.0, 0.0);
        opt.step(&mut s);
        assert!((s.tensor(id).item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn frozen_weight_is_bit_identical() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::full(&[4], 0.123_456_789)).unwrap();
        let before = s.tensor(id).clone();
        let mut opt = SgdState::new(0.1, 0.9, 1e-4);
        for _ in 0..5 {
            opt.step(&mut s);
        }
        assert!(s.tensor(id).bit_eq(&before));
        assert_eq!(opt.velocity_count(), 0);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut s, id) = store_with(0.0, 1.0, true);
        let mut opt = SgdState::new(1.0, 0.9, 0.0);
        opt.step(&mut s);
        assert_eq!(s.tensor(id).item(), -1.0);
        opt.step(&mut s);
        assert!((s.tensor(id).item() + 2.9).abs() < 1e-12);
        assert_eq!(opt.velocity(id).unwrap().len(), 1);
    }

    #[test]
    fn decay_applies_to_matrices_only() {
        let mut s = ParamStore::<f64>::new();
        let m = s.add("m", Tensor::full(&[1, 1], 2.0)).unwrap();
        let v = s.add("v", Tensor::full(&[1], 2.0)).unwrap();
        for id in [m, v] {
            s.set_trainable(id, true);
            s.tensor_mut(id).accumulate_grad(&[0.0]).unwrap();
        }
        let mut opt = SgdState::new(0.5, 0.0, 0.1);
        opt.step(&mut s);
        assert_eq!(s.tensor(m).data(), &[1.9]);
        assert_eq!(s.tensor(v).data(), &[2.0]);
    }

    #[test]
    fn warmup_reaches_base() {
        let sched = WarmupConstant::new(0.0015, 100, 0.05);
        assert_eq!(sched.warmup_steps, 5);
        assert!(sched.lr(0) < sched.lr(4));
        assert_eq!(sched.lr(4), 0.0015);
        assert_eq!(sched.lr(50), 0.0015);
    }
}
