//! Sparse expert layer: per-expert dispatch and gated combination.

use std::collections::BTreeMap;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraAdapter};
use crate::nn::{session_ffn, FFN_MATRICES};
use crate::params::{ParamStore, Session, TrainMask};
use crate::tensor::{Real, Tensor};

use super::routing::RoutingDecision;

/// Tolerance on gate rows summing to one before combination.
const GATE_SUM_TOL: f64 = 1e-6;

/// Computes expert outputs for every `(token, slot)` assignment and returns
/// them stacked slot-major as a `(topk·T) × d` matrix: row `s·T + t` is the
/// output of token `t`'s slot-`s` expert.
pub trait ExpertBackend<S: Real>: Sync {
    fn expert_outputs(&self, s: &mut Session<'_, S>, h: Var, decision: &RoutingDecision<S>, experts: &[String]) -> Result<Var>;
}

/// All experts evaluated in the calling graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalExperts;

impl<S: Real> ExpertBackend<S> for LocalExperts {
    fn expert_outputs(&self, s: &mut Session<'_, S>, h: Var, decision: &RoutingDecision<S>, experts: &[String]) -> Result<Var> {
        let (t, k, d) = (decision.tokens(), decision.topk, s.g.value(h).cols());
        let mut parts = Vec::new();
        for (e, pairs) in decision.assignments().into_iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let rows: Vec<usize> = pairs.iter().map(|&(tok, _)| tok).collect();
            let xe = s.g.gather_rows(h, &rows)?;
            let ye = session_ffn(s, xe, &experts[e])?;
            let dst = pairs.iter().map(|&(tok, slot)| slot * t + tok).collect();
            parts.push((ye, dst));
        }
        s.g.scatter_rows(k * t, d, parts)
    }
}

/// Gate-weighted sum of the slot outputs, evaluated in anchored form
/// `y₀ + Σ_{s≥1} g_s (y_s − y₀)`. Equal to `Σ_s g_s y_s` for gates summing
/// to one, and exact when the selected experts agree.
pub fn combine_slots<S: Real>(s: &mut Session<'_, S>, stacked: Var, gates: Var, tokens: usize, topk: usize) -> Result<Var> {
    let g = &mut s.g;
    let y0 = g.slice_rows(stacked, 0, tokens)?;
    let mut out = y0;
    for slot in 1..topk {
        let ys = g.slice_rows(stacked, slot * tokens, tokens)?;
        let diff = g.sub(ys, y0)?;
        let gate = g.slice_cols(gates, slot, 1)?;
        let term = g.mul_col(diff, gate)?;
        out = g.add(out, term)?;
    }
    Ok(out)
}

/// Frozen base weights of one expert plus optional adapters per matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFfn<S> {
    pub w_gate: Tensor<S>,
    pub w_up: Tensor<S>,
    pub w_down: Tensor<S>,
    /// Keyed by matrix name (`w_gate`, `w_up`, `w_down`).
    pub lora: BTreeMap<String, LoraAdapter<S>>,
}

impl<S: Real> ExpertFfn<S> {
    pub fn new(w_gate: Tensor<S>, w_up: Tensor<S>, w_down: Tensor<S>) -> Self {
        Self {
            w_gate,
            w_up,
            w_down,
            lora: BTreeMap::new(),
        }
    }

    pub fn matrix(&self, name: &str) -> &Tensor<S> {
        match name {
            "w_gate" => &self.w_gate,
            "w_up" => &self.w_up,
            _ => &self.w_down,
        }
    }

    /// Writes the expert under `prefix` (base weights frozen).
    pub fn install(&self, prefix: &str, store: &mut ParamStore<S>, adapters: &mut AdapterSet) {
        for m in FFN_MATRICES {
            let name = format!("{prefix}.{m}");
            store.insert(name.clone(), self.matrix(m).clone(), true);
            if let Some(ad) = self.lora.get(m) {
                store.insert(ad.spec.a_name(&name), ad.a.clone(), false);
                store.insert(ad.spec.b_name(&name), ad.b.clone(), false);
                adapters.insert(name, ad.spec);
            }
        }
    }

    pub fn from_store(store: &ParamStore<S>, adapters: &AdapterSet, prefix: &str) -> Result<Self> {
        let get = |m: &str| store.get(&format!("{prefix}.{m}")).cloned();
        let mut e = Self::new(get("w_gate")?, get("w_up")?, get("w_down")?);
        for m in FFN_MATRICES {
            let name = format!("{prefix}.{m}");
            if let Some(spec) = adapters.get(&name) {
                e.lora.insert(m.to_string(), LoraAdapter::from_store(store, &name, *spec)?);
            }
        }
        Ok(e)
    }
}

/// Sparse MoE combination of already-routed tokens: each token receives the
/// gate-weighted sum of its selected experts' outputs.
pub fn moe_forward<S: Real>(tokens: &Tensor<S>, experts: &[ExpertFfn<S>], decision: &RoutingDecision<S>) -> Result<Tensor<S>> {
    decision.validate()?;
    if decision.tokens() != tokens.rows() {
        return Err(Error::shape("moe_forward", tokens.shape(), decision.probs.shape()));
    }
    if decision.experts() != experts.len() {
        return Err(Error::Index {
            what: "experts",
            index: decision.experts(),
            len: experts.len(),
        });
    }
    check_gate_sums(&decision.gates)?;
    let mut store = ParamStore::new();
    let mut adapters = AdapterSet::new();
    let names: Vec<String> = (0..experts.len()).map(|e| format!("experts.{e}")).collect();
    for (e, ex) in experts.iter().enumerate() {
        ex.install(&names[e], &mut store, &mut adapters);
    }
    let mask = TrainMask::none();
    let mut s = Session::new(&store, &adapters, &mask);
    let h = s.g.constant(tokens.clone());
    let gates = s.g.constant(decision.gates.clone());
    let stacked = LocalExperts.expert_outputs(&mut s, h, decision, &names)?;
    let out = combine_slots(&mut s, stacked, gates, decision.tokens(), decision.topk)?;
    Ok(s.g.value(out).clone())
}

pub(crate) fn check_gate_sums<S: Real>(gates: &Tensor<S>) -> Result<()> {
    for r in 0..gates.rows() {
        let sum: f64 = gates.row(r).iter().map(|v| v.to_f64_lossy()).sum();
        if (sum - 1.0).abs() > GATE_SUM_TOL {
            return Err(Error::Invalid(format!("gate row {r} sums to {sum}, expected 1")));
        }
    }
    Ok(())
}
