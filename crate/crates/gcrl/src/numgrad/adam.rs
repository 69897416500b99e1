//! Adam with bias correction (β₁=0.9, β₂=0.999, ε=1e-8 by default).

use crate::error::{GcrlError, Result};
use crate::numgrad::params::{ParamStore, SlotId};

/// First/second moment buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_hyperparams(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(store: &ParamStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let m = store.entries().iter().map(|e| vec![0.0; e.len()]).collect();
        let v = store.entries().iter().map(|e| vec![0.0; e.len()]).collect();
        Self {
            m,
            v,
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// One optimizer step over the slots selected by `update`. Gradients of
    /// unselected slots are ignored (their moments do not advance either, so
    /// a later unfreeze starts cold).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        lr: f64,
        update: impl Fn(SlotId) -> bool,
    ) -> Result<()> {
        assert!(lr > 0.0, "adam step with non-positive lr");
        if self.m.len() != store.len() {
            return Err(GcrlError::Shape(format!(
                "adam state tracks {} params, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        for slot in store.slots() {
            if !update(slot) {
                continue;
            }
            let e = store.entry_mut(slot);
            if let Some(bad) = e.grad.iter().find(|g| !g.is_finite()) {
                return Err(GcrlError::NonFinite {
                    term: format!("gradient of `{}` ({bad})", e.name),
                });
            }
            adam_update(
                &mut e.values,
                &e.grad,
                &mut self.m[slot.0],
                &mut self.v[slot.0],
                self.t,
                lr,
                self.beta1,
                self.beta2,
                self.epsilon,
            );
        }
        Ok(())
    }
}

/// Core Adam update for one parameter tensor; `t` is the post-increment step.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    values: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    assert_eq!(values.len(), grad.len(), "adam shape mismatch");
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..values.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::params::Branch;

    fn store_with(values: Vec<f64>) -> (ParamStore, SlotId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.add("p", 1, n, values, Branch::Adaptable);
        (s, id)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut store, slot) = store_with(vec![1.0, -2.0, 3.0]);
        let mut adam = AdamState::new(&store);
        for _ in 0..5 {
            adam.step(&mut store, 0.01, |_| true).unwrap();
        }
        assert_eq!(store.values(slot), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // g=1, t=1: m̂=1, v̂=1 ⇒ Δ = −lr/(1+ε) ≈ −lr.
        let (mut store, slot) = store_with(vec![0.0]);
        store.entry_mut(slot).grad[0] = 1.0;
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, 0.005, |_| true).unwrap();
        let expected = -0.005 / (1.0 + 1e-8);
        assert!((store.values(slot)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_shrink() {
        let (mut store, slot) = store_with(vec![0.0]);
        let mut adam = AdamState::new(&store);
        store.entry_mut(slot).grad[0] = 0.7;
        adam.step(&mut store, 0.01, |_| true).unwrap();
        let d1 = store.values(slot)[0].abs();
        let before = store.values(slot)[0];
        store.entry_mut(slot).grad[0] = 0.7;
        adam.step(&mut store, 0.01, |_| true).unwrap();
        let d2 = (store.values(slot)[0] - before).abs();
        assert!(d2 <= d1 * (1.0 + 1e-9), "d1={d1} d2={d2}");
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let (mut store, slot) = store_with(vec![0.0]);
        store.entry_mut(slot).grad[0] = f64::NAN;
        let mut adam = AdamState::new(&store);
        assert!(adam.step(&mut store, 0.01, |_| true).is_err());
    }

    #[test]
    fn filtered_slots_do_not_move() {
        let mut store = ParamStore::new();
        let a = store.add("a", 1, 1, vec![1.0], Branch::Adaptable);
        let b = store.add("b", 1, 1, vec![1.0], Branch::ZBranch);
        store.entry_mut(a).grad[0] = 1.0;
        store.entry_mut(b).grad[0] = 1.0;
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, 0.1, |s| s == a).unwrap();
        assert!(store.values(a)[0] < 1.0);
        assert_eq!(store.values(b)[0], 1.0);
    }
}
