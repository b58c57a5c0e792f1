use std::collections::HashMap;
use std::ops::Index;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Whether AdamW applies decoupled weight decay to this tensor.
    pub decay: bool,
}

/// Ordered registry of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Registers every tensor on `tape`, as trainable parameters or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    tape.param(&e.name, e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound(vars)
    }

    /// Copies values from `other` for every name both stores share with equal shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            if let Some(src) = other.by_name(&e.name) {
                if src.shape() != e.value.shape() {
                    return Err(Error::shape(
                        "assign_from",
                        format!("`{}`: {:?} vs {:?}", e.name, e.value.shape(), src.shape()),
                    ));
                }
                e.value = src.clone();
            }
        }
        Ok(())
    }

    /// A new store with the entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            out.add(e.name.clone(), e.value.clone(), e.decay);
        }
        out
    }
}

/// Tape handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
