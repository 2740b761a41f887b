use std::collections::{BTreeMap, HashMap};
use std::ops::{Deref, DerefMut};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named model parameters plus the set of frozen path prefixes.
///
/// Names are dotted paths (`encoder.blocks.0.attn.q.weight`). Iteration order
/// is lexicographic so every traversal is reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    frozen: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        let prefix = prefix.into();
        if !self.frozen.contains(&prefix) {
            self.frozen.push(prefix);
        }
    }

    pub fn frozen_prefixes(&self) -> &[String] {
        &self.frozen
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.names().filter(|n| !self.is_frozen(n))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let param = self.get(name)?;
        if param.shape() != grad.shape() {
            return Err(Error::shape(
                "set_grad",
                format!("{name}: param {:?} vs grad {:?}", param.shape(), grad.shape()),
            ));
        }
        self.grads.insert(name.to_string(), grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// Order-sensitive FNV-1a digest over names and raw bits of the selected
    /// parameters.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.params.iter().filter(|(n, _)| filter(n)) {
            mix(name.as_bytes());
            for v in t.data() {
                mix(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// A tape bound to a parameter store.
///
/// Parameters are copied onto the tape on first use. With `track` set,
/// unfrozen parameters become grad-requiring leaves.
pub struct Ctx<'s> {
    tape: Tape,
    store: &'s ParamStore,
    bound: HashMap<String, Var>,
    track: bool,
}

impl<'s> Ctx<'s> {
    /// Context that records gradients for trainable parameters.
    pub fn train(store: &'s ParamStore) -> Self {
        Ctx { tape: Tape::new(), store, bound: HashMap::new(), track: true }
    }

    /// Forward-only context.
    pub fn eval(store: &'s ParamStore) -> Self {
        Ctx { tape: Tape::new(), store, bound: HashMap::new(), track: false }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let requires_grad = self.track && !self.store.is_frozen(name);
        let v = self.tape.leaf(value, requires_grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Runs the reverse sweep and returns per-parameter gradients for every
    /// trainable parameter touched by the forward pass.
    pub fn backward(self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let Ctx { tape, bound, store, .. } = self;
        let mut grads = tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, var) in bound {
            if store.is_frozen(&name) {
                continue;
            }
            if let Some(g) = grads.take(var) {
                out.insert(name, g);
            }
        }
        Ok(out)
    }
}

impl Deref for Ctx<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Ctx<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Copies a gradient map into the store, replacing older gradients.
pub fn apply_grads(store: &mut ParamStore, grads: BTreeMap<String, Tensor>) -> Result<()> {
    store.zero_grads();
    for (name, g) in grads {
        store.set_grad(&name, g)?;
    }
    Ok(())
}
