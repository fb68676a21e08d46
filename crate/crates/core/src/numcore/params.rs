use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("parameter `{0}` is already registered")]
    Duplicate(String),
    #[error("parameter `{0}` is not registered")]
    Unknown(String),
    #[error("parameter `{name}` has shape {have:?}, got {got:?}")]
    Shape {
        name: String,
        have: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Storage precision of a parameter store.
///
/// `F32` rounds every stored value to single precision on write, which makes
/// stores exactly representable in the checkpoint payload. `F64` keeps full
/// precision and is used by finite-difference tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Named parameters with a per-entry frozen flag.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        Self {
            entries: BTreeMap::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor, frozen: bool) -> Result<(), ParamError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        if self.precision == Precision::F32 {
            value.quantize_f32();
        }
        self.entries.insert(name, Param { value, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    /// Overwrites a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, mut value: Tensor) -> Result<(), ParamError> {
        let precision = self.precision;
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(ParamError::Shape {
                name: name.to_string(),
                have: p.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        if precision == Precision::F32 {
            value.quantize_f32();
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<(), ParamError> {
        self.entries
            .get_mut(name)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    /// Sets the frozen flag on every entry whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) {
        for (k, p) in self.entries.iter_mut() {
            if k.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.freeze_prefix("", true);
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Copies every entry of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: &ParamStore) -> Result<(), ParamError> {
        for (k, p) in other.iter() {
            self.insert(k, p.value.clone(), p.frozen)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values, as hex.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, p) in &self.entries {
            h.update(k.as_bytes());
            h.update([0u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_digest(h)
}
