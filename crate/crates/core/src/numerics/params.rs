use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors plus the set of names currently frozen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.frozen.remove(name);
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn freeze(&mut self, name: &str) {
        if self.entries.contains_key(name) {
            self.frozen.insert(name.to_string());
        }
    }

    pub fn unfreeze(&mut self, name: &str) {
        self.frozen.remove(name);
    }

    pub fn freeze_all(&mut self) {
        self.frozen = self.entries.keys().cloned().collect();
    }

    /// Freezes everything, then unfreezes names matching any `patterns`
    /// (`*` matches any substring).
    pub fn set_trainable(&mut self, patterns: &[String]) {
        self.freeze_all();
        let names: Vec<String> = self
            .entries
            .keys()
            .filter(|n| patterns.iter().any(|p| glob_match(p, n)))
            .cloned()
            .collect();
        for n in names {
            self.frozen.remove(&n);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .keys()
            .filter(|n| !self.frozen.contains(*n))
            .cloned()
            .collect()
    }

    /// Scalar count over names with the given prefix (`""` for all).
    pub fn scalar_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Content hash over names matching `prefixes`, used as a cache version.
    pub fn fingerprint(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                h.update(name.as_bytes());
                for d in t.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Names whose tensors differ bitwise between `self` and `other`
    /// (including names present in only one of them).
    pub fn diff(&self, other: &ParamStore) -> Vec<String> {
        let mut names: BTreeSet<&String> = self.entries.keys().collect();
        names.extend(other.entries.keys());
        names
            .into_iter()
            .filter(|n| match (self.entries.get(*n), other.entries.get(*n)) {
                (Some(a), Some(b)) => !a.bit_eq(b),
                _ => true,
            })
            .cloned()
            .collect()
    }
}

/// Fan-in scaled uniform init, `U(-1/√fan_in, 1/√fan_in)`.
pub fn init_linear<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

/// Minimal glob: `*` matches any (possibly empty) substring.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let mut rest = name;
    for (i, part) in parts.iter().enumerate() {
        if i == 0 {
            match rest.strip_prefix(part) {
                Some(r) => rest = r,
                None => return false,
            }
        } else if i == parts.len() - 1 {
            return rest.ends_with(part);
        } else {
            match rest.find(part) {
                Some(pos) => rest = &rest[pos + part.len()..],
                None => return false,
            }
        }
    }
    true
}
