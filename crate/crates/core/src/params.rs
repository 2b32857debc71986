//! Named model variables.

use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Variables keyed by unique name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate variable name '{name}'"
            )));
        }
        self.params
            .insert(name.to_string(), Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    /// Replaces a value; shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no variable '{name}'")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "variable '{name}' is {:?}, new value {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn size_in_bytes(&self) -> usize {
        self.params.values().map(|p| p.value.size_in_bytes()).sum()
    }

    /// Copy with every value converted to `dtype`.
    pub fn cast(&self, dtype: DType) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(dtype),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Records every variable as a tape leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<VarMap> {
        let mut vars = HashMap::with_capacity(self.params.len());
        for (name, p) in &self.params {
            let v = tape.variable(name, p.value.clone(), p.trainable)?;
            vars.insert(name.clone(), v);
        }
        Ok(VarMap { vars })
    }

    /// SHA-256 over names, dtypes, shapes and raw element bytes.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            h.update([p.value.dtype().tag()]);
            for &d in p.value.shape() {
                h.update((d as u32).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        h.finalize().into()
    }

    /// Largest elementwise difference against `other` (Inf when the stores
    /// have different variables or shapes).
    pub fn max_abs_diff(&self, other: &ParamStore) -> f32 {
        if self.params.len() != other.params.len() {
            return f32::INFINITY;
        }
        let mut worst = 0f32;
        for (name, p) in &self.params {
            let Some(q) = other.params.get(name) else {
                return f32::INFINITY;
            };
            if p.value.shape() != q.value.shape() {
                return f32::INFINITY;
            }
            for (a, b) in p.value.to_f32_vec().iter().zip(q.value.to_f32_vec()) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}

/// Tape handles for a model's variables.
#[derive(Debug, Clone)]
pub struct VarMap {
    vars: HashMap<String, Var>,
}

impl VarMap {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("model has no variable '{name}'")))
    }
}
