//! Adam with decoupled weight decay and a linear warmup-then-decay schedule.
//!
//! Shared parameters are slots: gradients from every aliasing site have
//! already been summed into the slot's buffer by the time a step runs, so a
//! shared tensor receives exactly one update per step.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::params::{ParamStore, SlotId};
use crate::tensor::{real, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            peak_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.01,
            warmup_steps: 10_000,
            max_steps: 1_000_000,
        }
    }
}

impl AdamHyper {
    /// Learning rate at 1-based step `t`: linear ramp to the peak over the
    /// warmup, then linear decay to zero at `max_steps`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps > 0 && t <= self.warmup_steps {
            return self.peak_lr * t as f64 / self.warmup_steps as f64;
        }
        if self.max_steps <= self.warmup_steps {
            return self.peak_lr;
        }
        let remaining = self.max_steps.saturating_sub(t) as f64;
        let span = (self.max_steps - self.warmup_steps) as f64;
        self.peak_lr * (remaining / span).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OptimError {
    /// A gradient contained NaN or infinity; the step was aborted before
    /// touching any parameter.
    NonFiniteGradient { name: String },
    /// Optimizer state does not match the store layout.
    StateMismatch { expected: usize, got: usize },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::NonFiniteGradient { name } => {
                write!(f, "non-finite gradient for parameter {name:?}; step aborted")
            }
            OptimError::StateMismatch { expected, got } => {
                write!(f, "optimizer state holds {got} slots, store has {expected}")
            }
        }
    }
}

impl core::error::Error for OptimError {}

/// First/second moment estimates per slot plus the step counter.
pub struct AdamState<T> {
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m = store.slot_ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        let v = store.slot_ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        AdamState { step: 0, m, v }
    }

    /// Rebuilds state from checkpointed tensors.
    pub fn from_parts(
        store: &ParamStore<T>,
        step: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    ) -> Result<Self, OptimError> {
        if m.len() != store.num_slots() || v.len() != store.num_slots() {
            return Err(OptimError::StateMismatch { expected: store.num_slots(), got: m.len() });
        }
        Ok(AdamState { step, m, v })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Grows the state for slots registered after construction (fresh
    /// fine-tuning heads).
    pub fn extend_for(&mut self, store: &ParamStore<T>) {
        for id in store.slot_ids().skip(self.m.len()) {
            self.m.push(Tensor::zeros(store.value(id).shape()));
            self.v.push(Tensor::zeros(store.value(id).shape()));
        }
    }
}

/// One optimizer step over every slot. Validates all gradients first, so a
/// non-finite gradient aborts without mutating parameters or state.
/// Returns the learning rate that was applied.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<f64, OptimError> {
    if state.m.len() != store.num_slots() {
        return Err(OptimError::StateMismatch {
            expected: store.num_slots(),
            got: state.m.len(),
        });
    }
    for id in store.slot_ids() {
        if !store.grad(id).all_finite() {
            return Err(OptimError::NonFiniteGradient { name: store.key(id).to_string() });
        }
    }

    let t = state.step + 1;
    let lr = hyper.lr_at(t);
    let beta1 = real::<T>(hyper.beta1);
    let beta2 = real::<T>(hyper.beta2);
    let one_m_b1 = real::<T>(1.0 - hyper.beta1);
    let one_m_b2 = real::<T>(1.0 - hyper.beta2);
    let bc1 = real::<T>(1.0 - num_traits::Float::powi(hyper.beta1, t.min(i32::MAX as u64) as i32));
    let bc2 = real::<T>(1.0 - num_traits::Float::powi(hyper.beta2, t.min(i32::MAX as u64) as i32));
    let eps = real::<T>(hyper.epsilon);
    let lr_t = real::<T>(lr);
    let wd = real::<T>(hyper.weight_decay);

    for id in store.slot_ids() {
        let SlotId(idx) = id;
        let grad = store.grad(id).clone();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for ((g, mi), vi) in grad.data().iter().zip(m.data_mut()).zip(v.data_mut()) {
            *mi = beta1 * *mi + one_m_b1 * *g;
            *vi = beta2 * *vi + one_m_b2 * *g * *g;
        }
        let value = store.value_mut(id);
        for ((p, &mi), &vi) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *p = *p - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        }
    }
    state.step = t;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_store(value: f64) -> (ParamStore<f64>, SlotId) {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::from_vec(&[1], vec![value])).unwrap();
        (store, id)
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let (mut store, id) = scalar_store(1.5);
        let mut state = AdamState::new(&store);
        let hyper = AdamHyper { weight_decay: 0.0, warmup_steps: 0, ..AdamHyper::default() };
        adam_step(&mut store, &mut state, &hyper).unwrap();
        assert_eq!(store.value(id).data()[0], 1.5);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // β1 = β2 = 0: m = g, v = g², update = lr·g/(|g| + ε).
        let (mut store, id) = scalar_store(0.0);
        store.grad_mut(id).data_mut()[0] = 1.0;
        let mut state = AdamState::new(&store);
        let hyper = AdamHyper {
            peak_lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 1e-6,
            weight_decay: 0.0,
            warmup_steps: 0,
            max_steps: u64::MAX,
        };
        adam_step(&mut store, &mut state, &hyper).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-6);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn warmup_is_linear_in_step() {
        let hyper = AdamHyper::default();
        assert_eq!(hyper.lr_at(1), 1e-4 * 1.0 / 10_000.0);
        assert_eq!(hyper.lr_at(5_000), 1e-4 * 0.5);
        assert_eq!(hyper.lr_at(10_000), 1e-4);
        // Then linear decay to zero at max_steps.
        let mid = 10_000 + (1_000_000 - 10_000) / 2;
        assert!((hyper.lr_at(mid) - 0.5e-4).abs() < 1e-12);
        assert_eq!(hyper.lr_at(1_000_000), 0.0);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let (mut store, id) = scalar_store(1.0);
        store.grad_mut(id).data_mut()[0] = f64::NAN;
        let mut state = AdamState::new(&store);
        let err = adam_step(&mut store, &mut state, &AdamHyper::default()).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient { name: "p".to_string() });
        // Nothing was mutated.
        assert_eq!(store.value(id).data()[0], 1.0);
        assert_eq!(state.step(), 0);
    }

    #[test]
    fn decay_moves_params_even_with_zero_grads() {
        let (mut store, id) = scalar_store(2.0);
        let mut state = AdamState::new(&store);
        let hyper = AdamHyper {
            peak_lr: 0.1,
            weight_decay: 0.01,
            warmup_steps: 0,
            max_steps: u64::MAX,
            ..AdamHyper::default()
        };
        adam_step(&mut store, &mut state, &hyper).unwrap();
        // Pure decoupled decay: p -= lr·wd·p.
        let expected = 2.0 - 0.1 * 0.01 * 2.0;
        assert!((store.value(id).data()[0] - expected).abs() < 1e-12);
    }
}
