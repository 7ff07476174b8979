//! Named parameter storage.
//!
//! Parameters live in a `BTreeMap` so iteration order (and therefore tape
//! layout, optimizer visitation and checkpoint layout) is deterministic.

use std::collections::{BTreeMap, BTreeSet};

use crate::tape::{Arr, Tape, Var};

/// A flat, ordered collection of named tensors plus a frozen-name set.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Arr>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace a parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name:?}"))
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

    /// Total number of scalar elements across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Freeze every parameter whose name starts with `prefix`. Frozen
    /// parameters are bound to the tape as usual but skipped by optimizers.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let hit: Vec<String> = self
            .params
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(hit);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| !self.frozen.contains(*n))
            .cloned()
            .collect()
    }

    /// Create tape leaves for every parameter, in name order.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.params {
            vars.insert(name.clone(), tape.leaf(value.clone()));
        }
        BoundParams { vars }
    }

    /// Merge another store under a name prefix (used to nest sub-models).
    pub fn adopt(&mut self, prefix: &str, other: ParamStore) {
        for (name, value) in other.params {
            let full = format!("{prefix}.{name}");
            if other.frozen.contains(&name) {
                self.frozen.insert(full.clone());
            }
            self.params.insert(full, value);
        }
    }
}

/// Tape-bound view of a [`ParamStore`]: one leaf [`Var`] per parameter.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("no bound parameter named {name:?}"))
    }

    /// The tape the parameters were bound to.
    pub fn tape(&self) -> &Tape {
        self.vars
            .values()
            .next()
            .expect("cannot take the tape of an empty BoundParams")
            .tape()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collect gradients for every bound parameter by name; parameters that
    /// did not participate in the loss get zeros.
    pub fn grads_by_name(&self, grads: &crate::tape::Gradients) -> BTreeMap<String, Arr> {
        self.vars
            .iter()
            .map(|(name, var)| (name.clone(), grads.get_or_zeros(var)))
            .collect()
    }
}
