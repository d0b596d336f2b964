use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    first_moment: Tensor<T>,
    second_moment: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Param {
            name,
            value,
            grad: Tensor::zeros(&shape),
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
        }
    }
}

/// Adam hyperparameters. Defaults are the original ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Named parameters with their gradient accumulators and Adam moments.
///
/// The Adam step counter is shared by every parameter in the store.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
    step: u64,
    adam: AdamConfig,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new(), step: 0, adam: AdamConfig::default() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param::new(name, value));
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_adam(&mut self, adam: AdamConfig) {
        self.adam = adam;
    }

    /// Adds `delta` into the gradient accumulator of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[T]) -> Result<()> {
        let grad = self.params[id.0].grad.data_mut();
        if grad.len() != delta.len() {
            return Err(Error::shape("accumulate_grad", format!("{} vs {}", grad.len(), delta.len())));
        }
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Sum of squared gradient entries over all parameters.
    pub fn grad_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g.to_f64_lossy().powi(2))
            .sum()
    }

    /// One bias-corrected Adam update, then clears the gradients.
    pub fn adam_step(&mut self, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.adam;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_float(beta1), T::from_float(beta2));
        let (one_minus_b1, one_minus_b2) = (T::from_float(1.0 - beta1), T::from_float(1.0 - beta2));
        let step_size = T::from_float(lr / correction1);
        let inv_sqrt_c2 = T::from_float(1.0 / correction2.sqrt());
        let eps = T::from_float(epsilon);
        for p in &mut self.params {
            let Param { value, grad, first_moment, second_moment, .. } = p;
            for (((w, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut().iter_mut())
                .zip(first_moment.data_mut().iter_mut())
                .zip(second_moment.data_mut().iter_mut())
            {
                *m = b1 * *m + one_minus_b1 * *g;
                *v = b2 * *v + one_minus_b2 * *g * *g;
                let denom = v.sqrt() * inv_sqrt_c2 + eps;
                *w -= step_size * *m / denom;
                *g = T::zero();
            }
        }
    }

    /// Copies of all parameter values, in insertion order.
    pub fn snapshot(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites values by name; every stored parameter must be present
    /// with an identical shape.
    pub fn load(&mut self, values: &[(String, Tensor<T>)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (name, tensor) in values {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = &mut self.params[id.0].value;
            if slot.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone();
        }
        Ok(())
    }

    /// Converts every parameter to another element type. Moments are reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        out.adam = self.adam;
        for p in &self.params {
            out.insert(p.name.clone(), p.value.cast()).expect("names are unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar Adam written straight from the update equations.
    fn reference_adam(theta: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v, mut w) = (0.0, 0.0, theta);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        w
    }

    fn single(theta: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::from_f64(&[1], &[theta]).unwrap()).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = single(1.5);
        store.adam_step(0.1);
        assert_eq!(store.value(id).data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = single(0.0);
        store.accumulate_grad(id, &[1.0]).unwrap();
        store.adam_step(0.1);
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
        assert_eq!(store.grad(id).data()[0], 0.0);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let (mut store, id) = single(0.3);
        for _ in 0..2 {
            store.accumulate_grad(id, &[0.7]).unwrap();
            store.adam_step(0.01);
        }
        let expected = reference_adam(0.3, &[0.7, 0.7], 0.01);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let (mut store, _) = single(0.0);
        assert!(store.insert("w", Tensor::zeros(&[1])).is_err());
    }
}
