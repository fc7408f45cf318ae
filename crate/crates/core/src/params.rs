use std::collections::BTreeMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Name and shape of every tensor, sorted by name.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    /// Merge `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (k, v) in other.tensors {
            if self.tensors.contains_key(&k) {
                return Err(Error::invalid(format!("duplicate parameter `{k}`")));
            }
            self.tensors.insert(k, v);
        }
        Ok(())
    }

    /// Record every tensor on the tape; names for which `trainable` is false
    /// become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn bind_all(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| true)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| false)
    }
}

/// Parameter tensors as recorded on one tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }

    /// Gradients accumulated on the tape, by parameter name. Parameters the
    /// loss did not reach are omitted.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| tape.grad(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}
