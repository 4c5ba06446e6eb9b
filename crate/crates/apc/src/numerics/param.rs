//! Named parameters and parameter sets.

use std::collections::HashMap;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::array::RealArray;

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: RealArray,
    pub gradient: RealArray,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: RealArray, trainable: bool) -> Self {
        let gradient = RealArray::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            gradient,
            trainable,
        }
    }
}

/// Insertion-ordered collection of parameters; iteration order is part of
/// the determinism contract (optimizer and EMA walk it in order).
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: IndexMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: RealArray, trainable: bool) {
        let name = name.into();
        let p = Parameter::new(name.clone(), value, trainable);
        if self.params.insert(name.clone(), p).is_some() {
            panic!("duplicate parameter {name}");
        }
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    /// Number of scalar coordinates across trainable parameters.
    pub fn trainable_len(&self) -> usize {
        self.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.gradient.fill(0.0);
        }
    }

    /// Zero all gradients, then install the given ones on trainable
    /// parameters. Frozen and unreached parameters stay at zero.
    pub fn apply_grads(&mut self, grads: &HashMap<String, RealArray>) -> Result<()> {
        self.zero_grads();
        for (name, g) in grads {
            let p = self.get_mut(name)?;
            if !p.trainable {
                continue;
            }
            if p.value.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "apply_grads",
                    left: p.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            p.gradient = g.clone();
        }
        Ok(())
    }

    /// Mark every parameter non-trainable.
    pub fn freeze(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = false;
            p.gradient.fill(0.0);
        }
    }

    /// Structural comparison: same names, same shapes.
    pub fn check_aligned(&self, other: &ParamSet) -> Result<()> {
        let mut left_only = Vec::new();
        let mut shape_mismatch = Vec::new();
        for p in self.iter() {
            match other.params.get(&p.name) {
                None => left_only.push(p.name.clone()),
                Some(q) if q.value.shape() != p.value.shape() => shape_mismatch.push(p.name.clone()),
                _ => {}
            }
        }
        let right_only: Vec<String> = other
            .names()
            .filter(|n| !self.contains(n))
            .map(|s| s.to_string())
            .collect();
        if left_only.is_empty() && right_only.is_empty() && shape_mismatch.is_empty() {
            Ok(())
        } else {
            Err(Error::Misaligned {
                left_only,
                right_only,
                shape_mismatch,
            })
        }
    }

    /// SHA-256 over names, shapes and little-endian value bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.iter() {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
