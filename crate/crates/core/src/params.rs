//! Named parameter arrays and their binding onto a tape.

use std::collections::BTreeMap;
use std::ops::Index;

use crate::hash::Fnv1a;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor<f32>,
    pub frozen: bool,
}

/// Ordered map of named parameters. Iteration order is lexicographic, which
/// fixes the order of every derived computation (checksums, optimizer sweeps).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>, frozen: bool) {
        self.entries.insert(name.into(), Param { tensor, frozen });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.entries.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
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

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Sets the frozen flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Copy of every parameter whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// FNV-1a over names and raw bits of every parameter under `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h = Fnv1a::new();
        for (name, p) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update_f32s(p.tensor.data());
        }
        h.finish()
    }

    /// Records every parameter as a leaf. Frozen parameters are constants.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.tensor.cast(), !p.frozen)))
            .collect();
        Bound { vars }
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }
}

/// Parameter name to tape handle.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(n, v)| (n.to_string(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} is not bound"))
    }
}
