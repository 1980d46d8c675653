//! Low-rank adapters on frozen linear weights.
//!
//! Weights are stored `in × out` and applied as `x · W`. An adapter with
//! `A: r × in` and `B: out × r` contributes `(alpha/r) · x · Aᵀ · Bᵀ`, the
//! row-vector form of `W0 x + (alpha/r) B A x`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{kernels, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraSpec {
    pub fn new(rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 || alpha <= 0.0 {
            return Err(Error::Config(format!("invalid LoRA rank {rank} / alpha {alpha}")));
        }
        Ok(Self { rank, alpha })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a_name(&self, weight: &str) -> String {
        format!("{weight}.lora_A")
    }

    pub fn b_name(&self, weight: &str) -> String {
        format!("{weight}.lora_B")
    }
}

/// Adapters attached to a model, keyed by target weight id.
pub type AdapterSet = BTreeMap<String, LoraSpec>;

/// A materialized adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<S> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
    pub spec: LoraSpec,
    pub target: String,
}

impl<S: Real> LoraAdapter<S> {
    fn check(&self, w0: &Tensor<S>) -> Result<()> {
        let r = self.spec.rank;
        if self.a.rows() != r || self.b.cols() != r {
            return Err(Error::shape("lora rank", self.a.shape(), self.b.shape()));
        }
        if self.a.cols() != w0.rows() || self.b.rows() != w0.cols() {
            return Err(Error::shape("lora target", w0.shape(), &[self.a.cols(), self.b.rows()]));
        }
        Ok(())
    }

    /// Reads an attached adapter out of a store.
    pub fn from_store(store: &ParamStore<S>, target: &str, spec: LoraSpec) -> Result<Self> {
        Ok(Self {
            a: store.get(&spec.a_name(target))?.clone(),
            b: store.get(&spec.b_name(target))?.clone(),
            spec,
            target: target.to_string(),
        })
    }
}

/// Graph form of the adapter delta: `scale · (x Aᵀ) Bᵀ`.
pub fn lora_delta<S: Real>(g: &mut Graph<S>, x: Var, a: Var, b: Var, scale: S) -> Result<Var> {
    if g.value(a).rows() != g.value(b).cols() {
        return Err(Error::shape("lora rank", g.value(a).shape(), g.value(b).shape()));
    }
    let at = g.transpose(a)?;
    let xa = g.matmul(x, at)?;
    let bt = g.transpose(b)?;
    let xab = g.matmul(xa, bt)?;
    Ok(g.scale(xab, scale))
}

/// `x · W0 + (alpha/r) · x · Aᵀ · Bᵀ`.
pub fn lora_forward<S: Real>(x: &Tensor<S>, w0: &Tensor<S>, adapter: &LoraAdapter<S>) -> Result<Tensor<S>> {
    adapter.check(w0)?;
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w0.clone()));
    let (av, bv) = (g.constant(adapter.a.clone()), g.constant(adapter.b.clone()));
    let base = g.matmul(xv, wv)?;
    let delta = lora_delta(&mut g, xv, av, bv, S::lit(adapter.spec.scaling()))?;
    let out = g.add(base, delta)?;
    Ok(g.value(out).clone())
}

/// `W0 + (alpha/r) · Aᵀ Bᵀ`. Not idempotent: merging twice adds the delta twice.
pub fn merge_adapter<S: Real>(w0: &Tensor<S>, adapter: &LoraAdapter<S>) -> Result<Tensor<S>> {
    adapter.check(w0)?;
    let delta = kernels::matmul(&kernels::transpose(&adapter.a), &kernels::transpose(&adapter.b))?;
    let s = S::lit(adapter.spec.scaling());
    let data = w0.data().iter().zip(delta.data()).map(|(&w, &d)| w + s * d).collect();
    Tensor::new(w0.shape().to_vec(), data)
}

/// Attaches a fresh adapter to every target weight and freezes the targets.
/// `A` is Gaussian with std `1/sqrt(in)`, `B` is zero.
pub fn attach_adapters<S: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    adapters: &mut AdapterSet,
    targets: &[String],
    spec: LoraSpec,
    rng: &mut R,
) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Invalid("attach_adapters: empty target set".into()));
    }
    for t in targets {
        if adapters.contains_key(t) {
            return Err(Error::Invalid(format!("adapter already attached to `{t}`")));
        }
        if !store.contains(t) {
            return Err(Error::UnknownParam(t.clone()));
        }
    }
    for t in targets {
        let w = store.get(t)?;
        let (fan_in, fan_out) = (w.rows(), w.cols());
        let a = Tensor::randn(&[spec.rank, fan_in], 1.0 / (fan_in as f64).sqrt(), rng);
        store.insert(spec.a_name(t), a, false);
        store.insert(spec.b_name(t), Tensor::zeros(&[fan_out, spec.rank]), false);
        store.set_frozen(t, true)?;
        adapters.insert(t.clone(), spec);
    }
    Ok(())
}

/// Folds every adapter into its base weight and removes the adapter factors.
/// Base weights stay frozen.
pub fn merge_all<S: Real>(store: &mut ParamStore<S>, adapters: &mut AdapterSet) -> Result<()> {
    let targets: Vec<(String, LoraSpec)> = adapters.iter().map(|(k, v)| (k.clone(), *v)).collect();
    for (t, spec) in targets {
        let adapter = LoraAdapter::from_store(store, &t, spec)?;
        let merged = merge_adapter(store.get(&t)?, &adapter)?;
        *store.get_mut(&t)? = merged;
        store.remove(&spec.a_name(&t));
        store.remove(&spec.b_name(&t));
        adapters.remove(&t);
    }
    Ok(())
}
