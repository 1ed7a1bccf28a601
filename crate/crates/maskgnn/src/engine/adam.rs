//! Adam optimizer state and update step.

use crate::engine::tape::{ParamId, ParamStore};
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

/// First/second moment estimates plus hyperparameters. Defaults follow the
/// optimizer's original recipe: beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, learning_rate: f64) -> AdamState {
        let zeros: Vec<Tensor> = store
            .iter_ids()
            .map(|p| {
                let (r, c) = store.value(p).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One bias-corrected Adam update over every parameter in the store, using
/// the store's current gradients. Rejects non-finite gradients so a
/// diverging trial aborts instead of silently poisoning the parameters.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for p in store.iter_ids() {
        if !store.grad(p).is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {}", p.0)));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for p in store.iter_ids() {
        let idx = p.0;
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        // Split borrows: gradients are read-only here.
        let grad = store.grad(p).clone();
        for ((mi, vi), gi) in m
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(grad.data())
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
        }
        let theta = store.value_mut(p);
        for ((ti, mi), vi) in theta.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *ti -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_moments_is_identity() {
        let mut store = ParamStore::new();
        let p = store.add(Tensor::from_vec(1, 3, vec![1.0, -2.0, 3.0]));
        let mut state = AdamState::new(&store, 0.1);
        adam_step(&mut store, &mut state).unwrap();
        assert_eq!(store.value(p).data(), &[1.0, -2.0, 3.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // theta = 1, g = 0.4, lr = 0.05: hand evaluation of the update
        // formulas gives 0.95000000124999996875 (m_hat/sqrt(v_hat) = sign(g)
        // up to epsilon on the first step).
        let mut store = ParamStore::new();
        let p = store.add(Tensor::scalar(1.0));
        store.grad_mut(p).data_mut()[0] = 0.4;
        let mut state = AdamState::new(&store, 0.05);
        adam_step(&mut store, &mut state).unwrap();
        assert!((store.value(p).item() - 0.95000000124999996875).abs() < 1e-15);
    }

    #[test]
    fn deterministic_for_identical_inputs() {
        let run = || {
            let mut store = ParamStore::new();
            let p = store.add(Tensor::from_vec(1, 2, vec![0.3, -0.7]));
            store.grad_mut(p).data_mut().copy_from_slice(&[0.11, -0.23]);
            let mut state = AdamState::new(&store, 0.01);
            adam_step(&mut store, &mut state).unwrap();
            store.grad_mut(p).data_mut().copy_from_slice(&[-0.05, 0.4]);
            adam_step(&mut store, &mut state).unwrap();
            store.value(p).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut store = ParamStore::new();
        let p = store.add(Tensor::scalar(1.0));
        store.grad_mut(p).data_mut()[0] = f64::NAN;
        let mut state = AdamState::new(&store, 0.05);
        assert!(adam_step(&mut store, &mut state).is_err());
    }
}
