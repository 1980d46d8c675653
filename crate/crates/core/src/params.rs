//! Named parameter storage, trainability masks and the per-forward session
//! that binds parameters into a graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub value: Tensor<S>,
    /// Never updated by any optimizer (stub encoders, LoRA base weights).
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    entries: BTreeMap<String, Param<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>, frozen: bool) {
        self.entries.insert(name.into(), Param { value, frozen });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<S>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.frozen)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<S>> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            frozen: p.frozen,
                        },
                    )
                })
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and exact element bits of the selected
    /// parameters.
    pub fn fingerprint(&self, mut select: impl FnMut(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            if !select(name) {
                continue;
            }
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Glob-style patterns (`*` matches any run of characters) naming the
/// parameters an optimizer may update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TrainMask {
    pub patterns: Vec<String>,
}

impl TrainMask {
    pub fn none() -> Self {
        Self { patterns: vec![] }
    }

    pub fn all() -> Self {
        Self {
            patterns: vec!["*".into()],
        }
    }

    pub fn of(patterns: &[&str]) -> Self {
        Self {
            patterns: patterns.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| glob_match(p, name))
    }

    /// Mask patterns combined with the store's frozen flags.
    pub fn trains<S: Real>(&self, store: &ParamStore<S>, name: &str) -> bool {
        !store.is_frozen(name) && self.matches(name)
    }
}

pub fn glob_match(pattern: &str, text: &str) -> bool {
    let (p, t) = (pattern.as_bytes(), text.as_bytes());
    let (mut pi, mut ti) = (0, 0);
    let (mut star, mut mark) = (None, 0);
    while ti < t.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some(pi);
            pi += 1;
            mark = ti;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ti = mark;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == b'*' {
        pi += 1;
    }
    pi == p.len()
}

/// One forward pass: a fresh graph plus read access to parameters.
pub struct Session<'a, S: Real> {
    pub g: Graph<S>,
    store: &'a ParamStore<S>,
    adapters: &'a AdapterSet,
    mask: &'a TrainMask,
}

impl<'a, S: Real> Session<'a, S> {
    pub fn new(store: &'a ParamStore<S>, adapters: &'a AdapterSet, mask: &'a TrainMask) -> Self {
        Self {
            g: Graph::new(),
            store,
            adapters,
            mask,
        }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    pub fn adapters(&self) -> &'a AdapterSet {
        self.adapters
    }

    pub fn mask(&self) -> &'a TrainMask {
        self.mask
    }

    pub fn trains(&self, name: &str) -> bool {
        self.mask.trains(self.store, name)
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let t = self.store.get(name)?;
        let rg = self.trains(name);
        Ok(self.g.param(name, t, rg))
    }

    /// `x · W`, plus the low-rank delta when an adapter targets `W`.
    pub fn linear(&mut self, x: Var, weight: &str) -> Result<Var> {
        let w = self.p(weight)?;
        let y = self.g.matmul(x, w)?;
        match self.adapters.get(weight) {
            None => Ok(y),
            Some(spec) => {
                let a = self.p(&spec.a_name(weight))?;
                let b = self.p(&spec.b_name(weight))?;
                let delta = crate::lora::lora_delta(&mut self.g, x, a, b, S::lit(spec.scaling()))?;
                self.g.add(y, delta)
            }
        }
    }

    /// Linear map followed by a bias row.
    pub fn affine(&mut self, x: Var, weight: &str, bias: &str) -> Result<Var> {
        let y = self.linear(x, weight)?;
        let b = self.p(bias)?;
        self.g.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.p(&format!("{prefix}.g"))?;
        let bias = self.p(&format!("{prefix}.b"))?;
        self.g.layer_norm(x, gain, bias, S::lit(crate::nn::LN_EPS))
    }
}
