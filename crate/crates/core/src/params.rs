//! Named parameter storage and graph binding.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Gradients keyed by fully-qualified parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Anything that owns named parameters.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    /// SHA-256 over names, shapes and little-endian bytes, in name order.
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |name, p| {
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.value.numel());
        n
    }

    fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, p| {
            if p.trainable {
                out.push(name.to_string());
            }
        });
        out
    }

    fn set_all_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |_, p| p.trainable = trainable);
    }
}

/// A flat, ordered map of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(
            name.into(),
            Param {
                value,
                trainable: true,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Copies every parameter onto `g` as a leaf. With `frozen`, no leaf
    /// requires gradients regardless of its trainable flag.
    pub fn bind(&self, g: &mut Graph, frozen: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                (
                    name.clone(),
                    g.leaf(p.value.clone(), p.trainable && !frozen),
                )
            })
            .collect();
        Bound { vars }
    }
}

impl Parameterized for ParamStore {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (k, v) in &self.params {
            f(k, v);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (k, v) in self.params.iter_mut() {
            f(k, v);
        }
    }
}

/// Parameters of one store bound as leaves on a graph.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects gradients of every bound leaf that required them, naming
    /// each as `prefix` + local name.
    pub fn collect_grads(&self, g: &Graph, grads: &Gradients, prefix: &str, out: &mut GradMap) {
        for (name, &v) in &self.vars {
            if g.requires_grad(v) {
                out.insert(format!("{prefix}{name}"), grads.wrt(v));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_changes_with_values() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 2]));
        let h0 = s.param_hash();
        assert_eq!(h0, s.clone().param_hash());
        s.get_mut("w").unwrap().data_mut()[3] = 1e-300;
        assert_ne!(h0, s.param_hash());
    }

    #[test]
    fn frozen_binding_requires_no_grad() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::ones(&[2]));
        s.insert("b", Tensor::ones(&[2]));
        s.set_trainable_prefix("b", false);
        let mut g = Graph::new();
        let live = s.bind(&mut g, false);
        assert!(g.requires_grad(live.var("a")));
        assert!(!g.requires_grad(live.var("b")));
        let frozen = s.bind(&mut g, true);
        assert!(!g.requires_grad(frozen.var("a")));
    }
}
