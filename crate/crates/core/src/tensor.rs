//! Dense f64 tensors and named parameter collections.
//!
//! Tensor storage is shared copy-on-write so tape nodes can alias parameter
//! buffers without copying them per step. `ParameterSet` keys are sorted, and
//! every iteration over it is in name order — optimizer updates, checkpoint
//! layout, and gradient reductions all inherit a fixed order from that.

use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParameter(String),
}

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    /// Marks trainable parameters; leaves created from data keep this false.
    pub requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            requires_grad: false,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![x]),
            requires_grad: false,
        }
    }

    /// Trainable tensor; `ParameterSet::insert` expects this flavor.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let mut t = Self::from_vec(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Shared handle to the storage, for aliasing into a tape node.
    pub fn storage(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Mutable view; copies only if the storage is still aliased elsewhere.
    pub fn data_mut(&mut self) -> &mut [f64] {
        let v: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }
}

/// Named parameter tensors with deterministic (sorted) iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<(), TensorError> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, TensorError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        match err {
            TensorError::ShapeMismatch { expected, actual, .. } => {
                assert_eq!(expected, 6);
                assert_eq!(actual, 5);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn data_mut_preserves_aliases_copy_on_write() {
        let mut a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let alias = a.storage();
        a.data_mut()[0] = 7.0;
        assert_eq!(alias[0], 1.0); // alias still sees the old value
        assert_eq!(a.data()[0], 7.0);
    }

    #[test]
    fn parameter_set_iterates_in_name_order() {
        let mut ps = ParameterSet::new();
        ps.insert("b", Tensor::zeros(vec![2])).unwrap();
        ps.insert("a", Tensor::zeros(vec![3])).unwrap();
        ps.insert("c", Tensor::zeros(vec![1])).unwrap();
        let names: Vec<_> = ps.names().cloned().collect();
        assert_eq!(names, ["a", "b", "c"]);
        assert_eq!(ps.count(), 6);
    }

    #[test]
    fn duplicate_insert_is_rejected() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::zeros(vec![1])).unwrap();
        assert!(ps.insert("w", Tensor::zeros(vec![1])).is_err());
    }
}
