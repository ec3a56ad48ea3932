//! Named, ordered storage for model parameters.
//!
//! Parameters live in a [`ParamStore`]: a sorted map from dotted names
//! (`enc.gin0.mlp.w1`, `head.out.b`, …) to dense `f64` matrices, each
//! tagged with a [`Role`]. Iteration order is always name order, which
//! keeps initialization, optimizer updates, and checkpoint layout
//! deterministic across runs.

use std::collections::BTreeMap;

use ndarray::Array2;
use thiserror::Error;

/// What part of the model a tensor belongs to. Roles drive which subsets
/// are mirrored into the momentum-averaged target network, which are
/// frozen during linear probing, and which receive the orthogonality
/// penalty during fine-tuning.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Role {
    /// Online encoder: feature projection, recurrent summary, GIN stack.
    Encoder,
    /// Projection matrices feeding the decoders.
    Projection,
    /// Learnable fill token for masked rows.
    MaskToken,
    /// Node-reconstruction decoder.
    DecoderNode,
    /// Edge-reconstruction decoder.
    DecoderEdge,
    /// Downstream readout and output head.
    Head,
}

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("unknown parameter name {0:?}")]
    Unknown(String),
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("parameter {0:?} contains a non-finite value")]
    NonFinite(String),
}

#[derive(Clone, Debug)]
struct Entry {
    value: Array2<f64>,
    role: Role,
}

/// Ordered name → tensor map with role tags.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, role: Role, value: Array2<f64>) -> Result<(), ParamError> {
        if self.entries.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.entries.insert(name.to_string(), Entry { value, role });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>, ParamError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>, ParamError> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn role(&self, name: &str) -> Result<Role, ParamError> {
        self.entries
            .get(name)
            .map(|e| e.role)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    /// Replace the value of an existing entry, keeping its role. The new
    /// value must match the stored shape.
    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<(), ParamError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        if entry.value.dim() != value.dim() {
            return Err(ParamError::ShapeMismatch {
                name: name.to_string(),
                expected: entry.value.dim(),
                found: value.dim(),
            });
        }
        entry.value = value;
        Ok(())
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// `(name, tensor)` pairs in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    /// `(name, role, tensor)` triples in name order.
    pub fn iter_full(&self) -> impl Iterator<Item = (&str, Role, &Array2<f64>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), e.role, &e.value))
    }

    /// Names carrying a given role, in name order.
    pub fn names_with_role(&self, role: Role) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.role == role)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Copy of the sub-store holding only entries with the given role.
    pub fn subset(&self, role: Role) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .filter(|(_, e)| e.role == role)
            .map(|(k, e)| (k.clone(), e.clone()))
            .collect();
        ParamStore { entries }
    }

    /// Copy every entry of `other` into this store. Duplicate names are
    /// rejected.
    pub fn extend_from(&mut self, other: &ParamStore) -> Result<(), ParamError> {
        for (name, role, value) in other.iter_full() {
            self.insert(name, role, value.clone())?;
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Error if any entry contains NaN or infinity.
    pub fn check_finite(&self) -> Result<(), ParamError> {
        for (name, entry) in &self.entries {
            if entry.value.iter().any(|v| !v.is_finite()) {
                return Err(ParamError::NonFinite(name.clone()));
            }
        }
        Ok(())
    }

    /// True when `other` has exactly the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(|((an, ae), (bn, be))| {
                an == bn && ae.value.dim() == be.value.dim()
            })
    }
}
