//! Named parameter storage and its binding onto an autodiff graph.

use indexmap::IndexMap;

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// What a parameter belongs to. Derived from its name, so it never has to be
/// serialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Base,
    Projection,
    AestheticValue,
    Lora,
}

impl ParamRole {
    pub fn of(name: &str) -> Self {
        if name.starts_with("proj.") {
            ParamRole::Projection
        } else if name.ends_with(".va.weight") {
            ParamRole::AestheticValue
        } else if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
            ParamRole::Lora
        } else {
            ParamRole::Base
        }
    }

    /// Whether the role belongs to the extractable adapter.
    pub fn is_adapter(self) -> bool {
        !matches!(self, ParamRole::Base)
    }
}

/// Ordered name → tensor map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return config_err(format!("duplicate parameter {name}"));
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Replaces an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => shape_err(format!(
                "{name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )),
            None => config_err(format!("unknown parameter {name}")),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| crate::Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor<T>) {
        let (k, v) = self.params.get_index(i).expect("parameter index in range");
        (k.as_str(), v)
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        self.params.get_index_mut(i).expect("parameter index in range").1
    }

    /// Removes every parameter matching `pred`, preserving order of the rest.
    pub fn remove_where(&mut self, mut pred: impl FnMut(&str) -> bool) -> usize {
        let before = self.params.len();
        self.params.retain(|k, _| !pred(k));
        before - self.params.len()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn role_of(&self, i: usize) -> ParamRole {
        ParamRole::of(self.at(i).0)
    }
}

/// A graph bound to a parameter store. Parameters become borrowed leaves on
/// first use; `trainable` decides which of them are differentiated.
pub struct Tape<'s, T: Scalar> {
    pub g: Graph<'s, T>,
    store: &'s ParamStore<T>,
    vars: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl<'s, T: Scalar> Tape<'s, T> {
    /// Tracking tape differentiating the parameters flagged in `trainable`.
    pub fn new(store: &'s ParamStore<T>, trainable: Vec<bool>) -> Self {
        debug_assert_eq!(trainable.len(), store.len());
        Self {
            g: Graph::new(),
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    /// Evaluation-only tape.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            g: Graph::inference(),
            store,
            vars: vec![None; store.len()],
            trainable: vec![false; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| crate::Error::Config(format!("missing parameter {name}")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let store: &'s ParamStore<T> = self.store;
        let v = self.g.param(store.at(i).1, self.trainable[i]);
        self.vars[i] = Some(v);
        Ok(v)
    }

    pub fn opt_param(&mut self, name: &str) -> Result<Option<Var>> {
        if self.has(name) {
            self.param(name).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.g.value(v)
    }

    /// Gradients of `loss` for every store entry, `None` where the parameter
    /// was frozen or unused.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads = self.g.backward(loss)?;
        Ok(self
            .vars
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect())
    }
}
