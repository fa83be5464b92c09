//! Named parameter storage.
//!
//! All trainable tensors (and non-trainable state such as batch-norm running
//! statistics) live in one [`ParamStore`], keyed by insertion order and by
//! name. The tape copies values out at record time and accumulates gradients
//! back in at backward time, so the store is the single owner of model state
//! across steps: it is what the optimizer updates and what checkpoints
//! serialize.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Vec<S>,
    pub trainable: bool,
}

pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter name {name}")));
        }
        let grad = vec![S::zero(); value.count()];
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[S]) {
        let g = &mut self.params[id.0].grad;
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = S::zero();
            }
        }
    }

    /// (trainable, non-trainable) scalar counts.
    pub fn counts(&self) -> (usize, usize) {
        let mut trainable = 0;
        let mut frozen = 0;
        for p in &self.params {
            if p.trainable {
                trainable += p.value.count();
            } else {
                frozen += p.value.count();
            }
        }
        (trainable, frozen)
    }

    /// Scalar counts restricted to parameters whose name starts with `prefix`.
    pub fn counts_with_prefix(&self, prefix: &str) -> (usize, usize) {
        let mut trainable = 0;
        let mut frozen = 0;
        for p in &self.params {
            if p.name.starts_with(prefix) {
                if p.trainable {
                    trainable += p.value.count();
                } else {
                    frozen += p.value.count();
                }
            }
        }
        (trainable, frozen)
    }
}

/// He-uniform initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)), used
/// ahead of ReLU activations.
pub fn he_uniform<S: Scalar>(rng: &mut Rng, shape: Shape, fan_in: usize) -> Tensor<S> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    rng.fill_uniform(-limit, limit, t.data_mut());
    t
}

/// Glorot-uniform initialization: U(+-sqrt(6/(fan_in+fan_out))), used for
/// linear and softmax layers.
pub fn glorot_uniform<S: Scalar>(
    rng: &mut Rng,
    shape: Shape,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    rng.fill_uniform(-limit, limit, t.data_mut());
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(Shape::new(vec![2])), true).unwrap();
        assert!(store.add("w", Tensor::zeros(Shape::new(vec![2])), true).is_err());
    }

    #[test]
    fn counts_split_by_trainability() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(Shape::new(vec![4])), true).unwrap();
        store.add("b", Tensor::zeros(Shape::new(vec![3])), false).unwrap();
        assert_eq!(store.counts(), (4, 3));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut r1 = Rng::new(9);
        let mut r2 = Rng::new(9);
        let a: Tensor<f32> = he_uniform(&mut r1, Shape::new(vec![10, 10]), 10);
        let b: Tensor<f32> = he_uniform(&mut r2, Shape::new(vec![10, 10]), 10);
        assert_eq!(a, b);
        let limit = (6.0f64 / 10.0).sqrt() as f32;
        assert!(a.data().iter().all(|v| v.abs() <= limit));
    }
}
