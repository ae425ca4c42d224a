//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::store::ParamStore;
use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    learning_rate: Real,
    beta1: Real,
    beta2: Real,
    epsilon: Real,
    moments: BTreeMap<String, (Vec<Real>, Vec<Real>)>,
}

impl AdamState {
    pub fn new(store: &ParamStore, learning_rate: Real) -> Self {
        Self::with_hyperparams(store, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(
        store: &ParamStore,
        learning_rate: Real,
        beta1: Real,
        beta2: Real,
        epsilon: Real,
    ) -> Self {
        let moments = store
            .iter()
            .map(|(name, t)| (name.to_string(), (vec![0.0; t.numel()], vec![0.0; t.numel()])))
            .collect();
        AdamState {
            step: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            moments,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> Real {
        self.learning_rate
    }

    pub fn beta1(&self) -> Real {
        self.beta1
    }

    pub fn beta2(&self) -> Real {
        self.beta2
    }

    pub fn epsilon(&self) -> Real {
        self.epsilon
    }

    pub fn moments(&self, name: &str) -> Option<(&[Real], &[Real])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn set_moments(&mut self, name: &str, m: Vec<Real>, v: Vec<Real>) -> Result<()> {
        let slot = self
            .moments
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if m.len() != slot.0.len() || v.len() != slot.1.len() {
            return Err(Error::ShapeMismatch {
                op: "adam moments",
                lhs: vec![slot.0.len()],
                rhs: vec![m.len()],
            });
        }
        *slot = (m, v);
        Ok(())
    }
}

/// One bias-corrected Adam update over every parameter in the store.
/// Every parameter must carry a populated gradient; gradients are zeroed
/// after the update.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    // Check all gradients exist before mutating anything.
    for (name, t) in store.iter() {
        if t.grad().is_none() {
            return Err(Error::MissingGradient(name.to_string()));
        }
        if !state.moments.contains_key(name) {
            return Err(Error::UnknownParam(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - (state.beta1 as f64).powf(t);
    let bc2 = 1.0 - (state.beta2 as f64).powf(t);
    let lr = state.learning_rate;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);

    for (name, tensor) in store.iter_mut() {
        let (m, v) = state.moments.get_mut(name).unwrap();
        // Sidestep simultaneous borrow of values and grad.
        let grad = tensor.grad().unwrap().to_vec();
        let values = tensor.values_mut();
        for i in 0..values.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1 as Real;
            let v_hat = v[i] / bc2 as Real;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut s = ParamStore::new(0);
        s.insert("p", Tensor::vector(vec![1.5, -2.5])).unwrap();
        s.zero_grads();
        let mut adam = AdamState::new(&s, 0.1);
        adam_step(&mut s, &mut adam).unwrap();
        assert_eq!(s.get("p").unwrap().values(), &[1.5, -2.5]);
        assert_eq!(adam.step(), 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // p0 = 1, g = 0.5, lr = 0.1: bias-corrected update is
        // 0.1 * 0.5 / (0.5 + 1e-8), hand-stepped to p1 = 0.900000002.
        let mut s = ParamStore::new(0);
        s.insert("p", Tensor::vector(vec![1.0])).unwrap();
        s.get_mut("p").unwrap().accumulate_grad(&[0.5]).unwrap();
        let mut adam = AdamState::new(&s, 0.1);
        adam_step(&mut s, &mut adam).unwrap();
        let p1 = s.get("p").unwrap().values()[0];
        assert!((p1 - 0.900000002).abs() < 1e-15, "p1 = {p1}");
        // gradient zeroed afterward
        assert_eq!(s.get("p").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn missing_gradient_is_rejected_by_name() {
        let mut s = ParamStore::new(0);
        s.insert("has", Tensor::vector(vec![1.0])).unwrap();
        s.insert("lacks", Tensor::vector(vec![1.0])).unwrap();
        s.get_mut("has").unwrap().zero_grad();
        let mut adam = AdamState::new(&s, 0.1);
        let err = adam_step(&mut s, &mut adam).unwrap_err().to_string();
        assert!(err.contains("lacks"), "{err}");
        // Nothing moved.
        assert_eq!(s.get("has").unwrap().values(), &[1.0]);
        assert_eq!(adam.step(), 0);
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_updates() {
        let run = || {
            let mut s = ParamStore::new(3);
            s.insert("w", Tensor::vector(vec![0.2, -0.4, 0.6])).unwrap();
            let mut adam = AdamState::new(&s, 0.01);
            for step in 0..5 {
                s.zero_grads();
                let g: Vec<_> = s.get("w").unwrap().values().iter().map(|v| v * (step as Real + 1.0)).collect();
                s.get_mut("w").unwrap().accumulate_grad(&g).unwrap();
                adam_step(&mut s, &mut adam).unwrap();
            }
            s.get("w").unwrap().values().to_vec()
        };
        assert_eq!(run(), run());
    }
}
