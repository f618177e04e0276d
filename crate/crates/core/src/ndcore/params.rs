use std::collections::HashMap;

use rand::Rng;

use super::array::{DenseArray, Real};
use crate::{Error, Result};

/// Half-width of the uniform weight initialization interval.
pub const INIT_SCALE: f64 = 0.08;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `[-scale, scale]`.
    Uniform(f64),
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: DenseArray<T>,
    grad: DenseArray<T>,
}

/// Named learnable arrays with gradient accumulators, in insertion order.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter; duplicate names are rejected.
    pub fn insert(&mut self, name: &str, value: DenseArray<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        let grad = DenseArray::zeros(value.shape());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn register<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<ParamId> {
        let mut value = DenseArray::zeros(shape);
        if value.is_empty() {
            return Err(Error::dim(name, "positive dimensions", format!("{shape:?}")));
        }
        match init {
            Init::Zeros => {}
            Init::Constant(c) => value.fill(T::lit(c)),
            Init::Uniform(scale) => {
                for x in value.data_mut() {
                    *x = T::lit(rng.random_range(-scale..=scale));
                }
            }
        }
        self.insert(name, value)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &DenseArray<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseArray<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &DenseArray<T> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut DenseArray<T> {
        &mut self.entries[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// `(name, value)` pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    pub fn grad_norm(&self) -> T {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data().iter())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = max_norm / norm;
            for e in &mut self.entries {
                e.grad.data_mut().iter_mut().for_each(|g| *g = *g * scale);
            }
        }
        norm
    }

    /// Overwrites values from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::dim("ParamStore::copy_values_from", self.len(), other.len()));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::dim(dst.name.clone(), format!("{:?}", dst.value.shape()), format!("{}{:?}", src.name, src.value.shape())));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// The same store in another precision (gradients reset).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(&e.name, e.value.cast()).expect("names already unique");
        }
        out
    }
}
