use std::collections::BTreeMap;

use crate::tensor::{DType, Tensor};

/// Gradients keyed by variable name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<String, Tensor>,
}

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) -> Option<Tensor> {
        self.grads.insert(name, grad)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.grads.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }

    /// Largest magnitude over all elements (0 for an empty set).
    pub fn max_abs(&self) -> f32 {
        self.grads
            .values()
            .flat_map(|t| t.to_f32_vec())
            .fold(0f32, |m, x| m.max(x.abs()))
    }

    /// Global L2 norm, accumulated in f64.
    pub fn l2_norm(&self) -> f32 {
        self.grads
            .values()
            .flat_map(|t| t.to_f32_vec())
            .map(|x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn dtype_of(&self, name: &str) -> Option<DType> {
        self.grads.get(name).map(Tensor::dtype)
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.grads
    }
}

impl FromIterator<(String, Tensor)> for GradientSet {
    fn from_iter<T: IntoIterator<Item = (String, Tensor)>>(iter: T) -> Self {
        Self {
            grads: iter.into_iter().collect(),
        }
    }
}
