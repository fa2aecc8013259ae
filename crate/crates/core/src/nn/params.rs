use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<E: Element> {
    name: String,
    tensor: Tensor<E>,
    trainable: bool,
}

/// Named tensors of a model: trainable parameters plus non-trainable
/// buffers such as batch-norm running statistics. Insertion order is stable
/// and defines checkpoint order.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Element = f32> {
    entries: Vec<Entry<E>>,
    by_name: HashMap<String, ParamId>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<E>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        tensor.set_requires_grad(trainable);
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].trainable)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.id(name).map(|id| self.tensor(id))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.id(name).map(|id| self.tensor_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<E>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Overwrites every value with `value` (trainable and buffers alike).
    pub fn fill(&mut self, value: E) {
        for e in &mut self.entries {
            e.tensor.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }

    /// Same names and values at another precision.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.add(e.name.clone(), e.tensor.cast(), e.trainable)
                .expect("names are unique in the source store");
        }
        out
    }

    /// Replaces values from `other`, which must hold the same names and
    /// shapes in any order.
    pub fn copy_values_from(&mut self, other: &ParamStore<E>) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .get(&e.name)
                .ok_or_else(|| Error::Config(format!("missing tensor {}", e.name)))?;
            if src.dims() != e.tensor.dims() {
                return Err(Error::shape(
                    "copy_values_from",
                    format!("{}: {:?} vs {:?}", e.name, src.dims(), e.tensor.dims()),
                ));
            }
            e.tensor.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform<E: Element>(&mut self, dims: &[usize], fan_in: usize) -> Result<Tensor<E>> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(dims, |_| E::from_f64_lossy(self.rng.random_range(-bound..bound)))
    }

    pub fn uniform<E: Element>(&mut self, dims: &[usize], lo: f64, hi: f64) -> Result<Tensor<E>> {
        Tensor::from_fn(dims, |_| E::from_f64_lossy(self.rng.random_range(lo..hi)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[1]).unwrap(), true).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1]).unwrap(), true).is_err());
    }

    #[test]
    fn trainable_flags_control_grad() {
        let mut s = ParamStore::<f32>::new();
        let w = s.add("w", Tensor::zeros(&[2]).unwrap(), true).unwrap();
        let b = s.add("running", Tensor::zeros(&[2]).unwrap(), false).unwrap();
        assert!(s.tensor(w).grad().is_some());
        assert!(s.tensor(b).grad().is_none());
        assert_eq!(s.trainable_ids().collect::<Vec<_>>(), vec![w]);
        assert_eq!(s.num_trainable(), 2);
    }

    #[test]
    fn fan_in_bounds() {
        let mut init = Initializer::new(7);
        let t: Tensor<f32> = init.fan_in_uniform(&[64, 16], 16).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 0.25));
        let again: Tensor<f32> = Initializer::new(7).fan_in_uniform(&[64, 16], 16).unwrap();
        assert_eq!(t, again);
    }
}
