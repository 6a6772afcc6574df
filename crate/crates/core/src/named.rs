//! Ordered, name-addressable collections of tensors.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map from name to tensor. Insertion order is the canonical order
/// used by checkpoints and reports.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensors<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Per-parameter gradients, aligned with the parameter set they came from.
pub type GradientSet<T> = NamedTensors<T>;

impl<T> Default for NamedTensors<T> {
    fn default() -> Self {
        NamedTensors {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> NamedTensors<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor; returns its index. Duplicate names are rejected.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate tensor name {name:?}")));
        }
        let idx = self.names.len();
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn at(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.tensors[idx]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Same names and shapes, all entries zero.
    pub fn zeros_like(&self) -> Self {
        NamedTensors {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
            index: self.index.clone(),
        }
    }

    /// True when both sets list the same names with the same shapes, in order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// L2 norm over all entries of all tensors, accumulated in 64-bit.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NamedTensors<U> {
        NamedTensors {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}
