//! Named parameter store shared by every model component.
//!
//! Parameters are registered once at model construction and bound into a
//! fresh graph as leaves each step. Trainable parameters get adaptive-moment
//! state; frozen ones never receive gradients.

use super::{AdamState, Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub trainable: bool,
    pub moments: Option<AdamState<S>>,
}

/// Ordered map of unique parameter names to tensors. BTreeMap keeps
/// iteration (and thus checkpoints and gradient application) deterministic.
pub struct ParamStore<S> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>, trainable: bool) {
        let prev = self.params.insert(
            name.to_string(),
            Param { value, trainable, moments: None },
        );
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &Param<S> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<S> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Mark a name prefix trainable or frozen (phase switches).
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// FNV-1a digest over names, shapes and value bits; used by the
    /// frozen-phase contract checks.
    pub fn digest_prefix(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, p) in self.params.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            eat(name.as_bytes());
            for &e in p.value.shape() {
                eat(&(e as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.to_f64().to_le_bytes());
            }
        }
        h
    }
}

/// Binds store parameters into one graph, one leaf per distinct name.
pub struct Binder {
    bound: Vec<(String, NodeId)>,
    index: BTreeMap<String, NodeId>,
}

impl Default for Binder {
    fn default() -> Self {
        Self::new()
    }
}

impl Binder {
    pub fn new() -> Self {
        Binder { bound: Vec::new(), index: BTreeMap::new() }
    }

    pub fn param<S: Scalar>(
        &mut self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        name: &str,
    ) -> NodeId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let p = store.get(name);
        let id = g.leaf(p.value.clone(), p.trainable);
        self.bound.push((name.to_string(), id));
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn bound(&self) -> &[(String, NodeId)] {
        &self.bound
    }

    /// Gradient tensors for every bound trainable parameter, in bind order.
    pub fn collect_grads<S: Scalar>(
        &self,
        g: &Graph<S>,
        grads: &super::Gradients<S>,
    ) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for (name, id) in &self.bound {
            if g.requires_grad(*id) {
                if let Some(t) = grads.get(*id) {
                    out.push((name.clone(), t.clone()));
                }
            }
        }
        out
    }
}

/// Apply an optimizer step to named gradients. In checked mode a non-finite
/// gradient rejects the whole step and leaves every parameter untouched.
pub fn apply_grads<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &[(String, Tensor<S>)],
    cfg: &super::AdamConfig,
    checked: bool,
) -> Result<()> {
    if checked {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::StepRejected(format!("non-finite gradient for {name}")));
            }
        }
    }
    for (name, g) in grads {
        let p = store.get_mut(name);
        debug_assert!(p.trainable, "gradient for frozen parameter {name}");
        let moments = p
            .moments
            .get_or_insert_with(|| AdamState::new(p.value.shape()));
        moments.step(&mut p.value, g, cfg);
    }
    Ok(())
}
