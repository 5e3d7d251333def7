//! Named parameter collection with gradient slots.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Parameters keyed by hierarchical dotted names. Iteration is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    entries: BTreeMap<String, ParamEntry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Index(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name, ParamEntry { value, grad });
        Ok(())
    }

    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn insert_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| F::c(rng.uniform_in(-bound, bound)));
        self.insert(name, t).expect("fresh parameter name");
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], v: f64) {
        self.insert(name, Tensor::full(shape, F::c(v)))
            .expect("fresh parameter name");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Index(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> &Tensor<F> {
        self.get(name).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor<F> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor<F> {
        &self.entries[name].grad
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry<F>> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[F]) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(e.grad.len(), grad.len(), "gradient size for `{name}`");
        for (a, &g) in e.grad.data_mut().iter_mut().zip(grad) {
            *a = *a + g;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.grad.data().iter())
            .map(|g| {
                let g = g.f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Precision conversion, e.g. re-running an f32 model in f64.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            grad: e.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Entries whose names start with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names().filter(move |n| n.starts_with(prefix))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicographic_order_and_duplicate_rejection() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("b.w", Tensor::zeros(&[2])).unwrap();
        ps.insert("a.w", Tensor::zeros(&[3])).unwrap();
        assert!(ps.insert("a.w", Tensor::zeros(&[1])).is_err());
        let names: Vec<_> = ps.names().collect();
        assert_eq!(names, ["a.w", "b.w"]);
        assert_eq!(ps.num_scalars(), 5);
        assert_eq!(ps.grad("a.w").shape(), &[3]);
    }

    #[test]
    fn accumulate_and_norm() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("x", Tensor::zeros(&[2])).unwrap();
        ps.accumulate_grad("x", &[3.0, 0.0]);
        ps.accumulate_grad("x", &[0.0, 4.0]);
        assert_eq!(ps.grad_norm(), 5.0);
        ps.zero_grads();
        assert_eq!(ps.grad_norm(), 0.0);
    }
}
