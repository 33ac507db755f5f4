use std::collections::BTreeMap;

use super::Real;
use crate::error::{shape_err, Error, Result};

/// A named parameter array: flat row-major data plus its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {expected} elements, got {}",
                shape,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// An ordered collection of named parameter arrays.
///
/// Iteration order is lexicographic by name, which keeps serialization and
/// optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Subset of parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// True when both sets hold the same names with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(other.map.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape == vb.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.map
            .values()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient accumulators keyed by parameter name. Only parameters that a
/// backward pass actually touched have an entry.
#[derive(Clone, Debug, Default)]
pub struct Grads<T = f32> {
    map: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    /// Zero-initialized on first access.
    pub fn slot(&mut self, name: &str, len: usize) -> &mut [T] {
        let entry = self
            .map
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); len]);
        debug_assert_eq!(entry.len(), len, "gradient length changed for {name}");
        entry
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.map.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
