use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Owns every parameter of one model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// grad[id] += scale · g
    pub fn accumulate_grad(&mut self, id: ParamId, g: &[T], scale: T) {
        let dst = self.params[id.0].grad.data_mut();
        for (d, &s) in dst.iter_mut().zip(g) {
            *d += scale * s;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Seeded initializer: fan-in-scaled uniform weights, zero biases.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// U(-1/√fan_in, 1/√fan_in)
    pub fn fan_in_uniform<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..bound)))
    }

    /// He-uniform, bound √(6 / fan_in): keeps activation variance roughly
    /// constant through rectifier-like layers.
    pub fn he_uniform<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..bound)))
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..bound)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f64>::new();
        store.add("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(store.add("a.w", Tensor::zeros(&[3])).is_err());
        assert_eq!(store.id_of("a.w"), Some(ParamId(0)));
    }

    #[test]
    fn grad_matches_value_shape() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(store.get(id).grad.shape(), &[3, 4]);
        store.accumulate_grad(id, &[1.0; 12], 0.5);
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.5));
        store.zero_grad();
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn initializer_is_seeded_and_bounded() {
        let a: Tensor<f64> = Initializer::new(4).fan_in_uniform(&[8, 9], 9);
        let b: Tensor<f64> = Initializer::new(4).fan_in_uniform(&[8, 9], 9);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0 / 3.0));
    }
}
