//! In-process simulation of expert-level model parallelism and
//! modality-level data parallelism.
//!
//! Logical workers exchange tokens through explicit per-worker queues. Each
//! worker records its expert computation on a private tape; the sharded
//! layer enters the caller's graph as one custom node whose backward replays
//! the worker tapes and folds their contributions in ascending worker order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{CustomBackward, Graph, Var};
use crate::connectors::Modality;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lora::AdapterSet;
use crate::model::UniMoe;
use crate::moe::layer::check_gate_sums;
use crate::moe::routing::RoutingDecision;
use crate::moe::{combine_slots, ExpertBackend, ExpertFfn, LocalExperts};
use crate::nn::{session_ffn, FFN_MATRICES};
use crate::params::{ParamStore, Session, TrainMask};
use crate::tensor::{Real, Tensor};
use crate::train::{shard_gradients, BatchGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardPolicy {
    #[default]
    ByModality,
    RoundRobin,
}

/// Expert placement: `"round_robin"` or an explicit owner per expert.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExpertMap {
    Explicit(Vec<usize>),
    Named(String),
}

impl Default for ExpertMap {
    fn default() -> Self {
        ExpertMap::Named("round_robin".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub expert_map: ExpertMap,
    #[serde(default)]
    pub data_shard: ShardPolicy,
    #[serde(default)]
    pub exec: Exec,
}

fn one() -> usize {
    1
}

impl Default for ParallelConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            expert_map: ExpertMap::default(),
            data_shard: ShardPolicy::default(),
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerGroup {
    pub workers: usize,
    /// Owning worker of each expert.
    pub owner: Vec<usize>,
    pub policy: ShardPolicy,
}

impl WorkerGroup {
    pub fn new(workers: usize, experts: usize, map: &ExpertMap, policy: ShardPolicy) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("worker count must be positive".into()));
        }
        let owner = match map {
            ExpertMap::Named(n) if n == "round_robin" => (0..experts).map(|e| e % workers).collect(),
            ExpertMap::Named(n) => return Err(Error::Config(format!("unknown expert_map `{n}`"))),
            ExpertMap::Explicit(v) => {
                if v.len() != experts {
                    return Err(Error::Config(format!(
                        "expert_map lists {} owners for {experts} experts",
                        v.len()
                    )));
                }
                if let Some(&w) = v.iter().find(|&&w| w >= workers) {
                    return Err(Error::Config(format!("expert_map names worker {w} of {workers}")));
                }
                v.clone()
            }
        };
        Ok(Self { workers, owner, policy })
    }

    pub fn from_config(cfg: &ParallelConfig, experts: usize) -> Result<Self> {
        Self::new(cfg.workers, experts, &cfg.expert_map, cfg.data_shard)
    }

    pub fn experts_of(&self, worker: usize) -> Vec<usize> {
        (0..self.owner.len()).filter(|&e| self.owner[e] == worker).collect()
    }
}

/// Partitions experts by owner. Every expert lands on exactly one worker.
pub fn shard_experts<S: Real>(experts: &[ExpertFfn<S>], group: &WorkerGroup) -> Result<Vec<BTreeMap<usize, ExpertFfn<S>>>> {
    if experts.len() != group.owner.len() {
        return Err(Error::Index {
            what: "expert map",
            index: experts.len(),
            len: group.owner.len(),
        });
    }
    let mut shards = vec![BTreeMap::new(); group.workers];
    for (e, ex) in experts.iter().enumerate() {
        shards[group.owner[e]].insert(e, ex.clone());
    }
    Ok(shards)
}

/// Inverse of [`shard_experts`].
pub fn unshard_experts<S: Real>(shards: &[BTreeMap<usize, ExpertFfn<S>>]) -> Result<Vec<ExpertFfn<S>>> {
    let mut all: BTreeMap<usize, ExpertFfn<S>> = BTreeMap::new();
    for shard in shards {
        for (&e, ex) in shard {
            if all.insert(e, ex.clone()).is_some() {
                return Err(Error::Invalid(format!("expert {e} appears on two workers")));
            }
        }
    }
    if all.keys().enumerate().any(|(i, &e)| i != e) {
        return Err(Error::Invalid("expert shards do not cover a contiguous id range".into()));
    }
    Ok(all.into_values().collect())
}

/// One token copy sent to the worker that owns its selected expert.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Message {
    pub token: usize,
    pub slot: usize,
    pub expert: usize,
    pub gate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan {
    pub tokens: usize,
    pub topk: usize,
    /// Per-worker inbound queue in token-then-slot order.
    pub queues: Vec<Vec<Message>>,
}

impl DispatchPlan {
    pub fn build<S: Real>(decision: &RoutingDecision<S>, group: &WorkerGroup) -> Result<Self> {
        decision.validate()?;
        if decision.experts() != group.owner.len() {
            return Err(Error::Index {
                what: "expert map",
                index: decision.experts(),
                len: group.owner.len(),
            });
        }
        let mut queues = vec![Vec::new(); group.workers];
        for t in 0..decision.tokens() {
            for (slot, &expert) in decision.selected_for(t).iter().enumerate() {
                queues[group.owner[expert]].push(Message {
                    token: t,
                    slot,
                    expert,
                    gate: decision.gates.at(t, slot).to_f64_lossy(),
                });
            }
        }
        let plan = Self {
            tokens: decision.tokens(),
            topk: decision.topk,
            queues,
        };
        plan.check()?;
        Ok(plan)
    }

    /// Rows of the slot-major stacked output that each message returns to.
    pub fn return_rows(&self, worker: usize) -> Vec<usize> {
        self.queues[worker].iter().map(|m| m.slot * self.tokens + m.token).collect()
    }

    /// Messages processed per worker.
    pub fn loads(&self) -> Vec<usize> {
        self.queues.iter().map(Vec::len).collect()
    }

    /// Every `(token, slot)` pair must appear in exactly one queue.
    pub fn check(&self) -> Result<()> {
        let mut seen = vec![false; self.tokens * self.topk];
        for w in 0..self.queues.len() {
            for r in self.return_rows(w) {
                if r >= seen.len() || seen[r] {
                    return Err(Error::Invalid(format!("dispatch plan row {r} is missing or duplicated")));
                }
                seen[r] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invalid("dispatch plan drops an assignment".into()));
        }
        Ok(())
    }
}

struct WorkerTape<S: Real> {
    graph: Graph<S>,
    input: Var,
    out: Var,
    /// Source token of each local row.
    tokens: Vec<usize>,
    /// Stacked-output row of each local row.
    rows: Vec<usize>,
}

/// Runs one worker's queue on a private tape.
fn run_worker<S: Real>(
    store: &ParamStore<S>,
    adapters: &AdapterSet,
    mask: &TrainMask,
    h: &Tensor<S>,
    queue: &[Message],
    rows: Vec<usize>,
    experts: &[String],
) -> Result<Option<WorkerTape<S>>> {
    if queue.is_empty() {
        return Ok(None);
    }
    let d = h.cols();
    let tokens: Vec<usize> = queue.iter().map(|m| m.token).collect();
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in &tokens {
        data.extend_from_slice(h.row(t));
    }
    let mut s = Session::new(store, adapters, mask);
    let input = s.g.input(Tensor::new(vec![tokens.len(), d], data)?, true);
    let mut owned: Vec<usize> = queue.iter().map(|m| m.expert).collect();
    owned.sort_unstable();
    owned.dedup();
    let mut parts = Vec::with_capacity(owned.len());
    for e in owned {
        let idx: Vec<usize> = (0..queue.len()).filter(|&i| queue[i].expert == e).collect();
        let xe = s.g.gather_rows(input, &idx)?;
        let ye = session_ffn(&mut s, xe, &experts[e])?;
        parts.push((ye, idx));
    }
    let out = s.g.scatter_rows(queue.len(), d, parts)?;
    Ok(Some(WorkerTape {
        graph: s.g,
        input,
        out,
        tokens,
        rows,
    }))
}

struct ShardedRule<S: Real> {
    tokens: usize,
    width: usize,
    tapes: Vec<Option<WorkerTape<S>>>,
    /// Position of each parameter among the custom node's inputs (after `h`).
    params: BTreeMap<String, usize>,
    exec: Exec,
}

impl<S: Real> CustomBackward<S> for ShardedRule<S> {
    fn backward(&self, grad_out: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let per_worker = self.exec.map(self.tapes.iter().collect(), |tape| -> Result<_> {
            let Some(tape) = tape else { return Ok(None) };
            let d = grad_out.cols();
            let mut seed = Vec::with_capacity(tape.rows.len() * d);
            for &r in &tape.rows {
                seed.extend_from_slice(grad_out.row(r));
            }
            let seed = Tensor::new(vec![tape.rows.len(), d], seed)?;
            let grads = tape.graph.backward_with(tape.out, seed)?;
            let gin = grads.get(tape.input).cloned();
            Ok(Some((gin, tape.graph.param_grads(&grads))))
        });
        let mut out: Vec<Option<Tensor<S>>> = vec![None; self.params.len() + 1];
        let mut gh = Tensor::zeros(&[self.tokens, self.width]);
        for (w, res) in per_worker.into_iter().enumerate() {
            let Some((gin, pgrads)) = res? else { continue };
            if let Some(gin) = gin {
                let tape = self.tapes[w].as_ref().expect("tape present");
                for (i, &t) in tape.tokens.iter().enumerate() {
                    let row = &mut gh.data_mut()[t * self.width..(t + 1) * self.width];
                    for (o, &v) in row.iter_mut().zip(gin.row(i)) {
                        *o = *o + v;
                    }
                }
            }
            for (name, g) in pgrads {
                let Some(&slot) = self.params.get(&name) else { continue };
                match &mut out[slot] {
                    Some(acc) => acc.add_assign(&g),
                    none => *none = Some(g),
                }
            }
        }
        out[0] = Some(gh);
        Ok(out)
    }
}

/// Expert backend that places experts on workers per the group's map.
#[derive(Debug, Clone)]
pub struct ShardedExperts {
    pub group: WorkerGroup,
    pub exec: Exec,
}

impl ShardedExperts {
    pub fn new(group: WorkerGroup, exec: Exec) -> Self {
        Self { group, exec }
    }
}

impl<S: Real> ExpertBackend<S> for ShardedExperts {
    fn expert_outputs(&self, s: &mut Session<'_, S>, h: Var, decision: &RoutingDecision<S>, experts: &[String]) -> Result<Var> {
        let plan = DispatchPlan::build(decision, &self.group)?;
        let hv = s.g.value(h).clone();
        let (t, d) = (hv.rows(), hv.cols());
        let mut names = Vec::new();
        for p in experts {
            for m in FFN_MATRICES {
                let w = format!("{p}.{m}");
                if let Some(spec) = s.adapters().get(&w) {
                    names.push(spec.a_name(&w));
                    names.push(spec.b_name(&w));
                }
                names.push(w);
            }
        }
        let mut inputs = vec![h];
        let mut params = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            inputs.push(s.p(n)?);
            params.insert(n.clone(), i + 1);
        }
        let (store, adapters, mask) = (s.store(), s.adapters(), s.mask());
        let jobs: Vec<usize> = (0..self.group.workers).collect();
        let tapes = self.exec.map(jobs, |w| {
            run_worker(store, adapters, mask, &hv, &plan.queues[w], plan.return_rows(w), experts)
        });
        let tapes: Vec<Option<WorkerTape<S>>> = tapes.into_iter().collect::<Result<_>>()?;
        let mut value = Tensor::zeros(&[decision.topk * t, d]);
        for tape in tapes.iter().flatten() {
            let ov = tape.graph.value(tape.out);
            for (i, &r) in tape.rows.iter().enumerate() {
                value.data_mut()[r * d..(r + 1) * d].copy_from_slice(ov.row(i));
            }
        }
        let rule = ShardedRule {
            tokens: t,
            width: d,
            tapes,
            params,
            exec: self.exec,
        };
        Ok(s.g.custom(value, inputs, Box::new(rule)))
    }
}

/// Expert-sharded MoE combination; returns the combined outputs and the
/// number of messages each worker processed.
pub fn dispatch_and_combine<S: Real>(
    tokens: &Tensor<S>,
    experts: &[ExpertFfn<S>],
    decision: &RoutingDecision<S>,
    group: &WorkerGroup,
    exec: Exec,
) -> Result<(Tensor<S>, Vec<usize>)> {
    if decision.tokens() != tokens.rows() {
        return Err(Error::shape("dispatch_and_combine", tokens.shape(), decision.probs.shape()));
    }
    check_gate_sums(&decision.gates)?;
    let plan = DispatchPlan::build(decision, group)?;
    if experts.len() != group.owner.len() {
        return Err(Error::Index {
            what: "experts",
            index: experts.len(),
            len: group.owner.len(),
        });
    }
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
    let backend = ShardedExperts::new(group.clone(), exec);
    let stacked = backend.expert_outputs(&mut s, h, decision, &names)?;
    let out = combine_slots(&mut s, stacked, gates, decision.tokens(), decision.topk)?;
    Ok((s.g.value(out).clone(), plan.loads()))
}

/// Sample indices per worker. By-modality sends the k-th modality present
/// in the batch (in canonical modality order) to worker `k mod W`; when
/// that would leave a worker idle the batch is dealt round-robin instead.
pub fn shard_batch(samples: &[Sample], group: &WorkerGroup) -> Vec<Vec<usize>> {
    let w = group.workers;
    let round_robin = || {
        let mut shards = vec![Vec::new(); w];
        for i in 0..samples.len() {
            shards[i % w].push(i);
        }
        shards
    };
    match group.policy {
        ShardPolicy::RoundRobin => round_robin(),
        ShardPolicy::ByModality => {
            let present: Vec<Modality> = Modality::ALL
                .into_iter()
                .filter(|m| samples.iter().any(|s| s.modality() == *m))
                .collect();
            let mut shards = vec![Vec::new(); w];
            for (i, s) in samples.iter().enumerate() {
                let k = present.iter().position(|&m| m == s.modality()).expect("present");
                shards[k % w].push(i);
            }
            if shards.iter().any(Vec::is_empty) && samples.len() >= w {
                round_robin()
            } else {
                shards
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataParallelStep<S: Real> {
    /// Mean gradient over the batch.
    pub grads: BTreeMap<String, Tensor<S>>,
    pub loss_mean: f64,
    pub aux_mean: f64,
    pub shards: Vec<Vec<usize>>,
}

/// Per-worker forward/backward over its shard, then a sum of shard
/// gradients in ascending worker order scaled by `1/batch`.
pub fn data_parallel_step<S: Real>(
    model: &UniMoe<S>,
    samples: &[Sample],
    group: &WorkerGroup,
    mask: &TrainMask,
    exec: Exec,
) -> Result<DataParallelStep<S>> {
    if samples.is_empty() {
        return Err(Error::Invalid("data_parallel_step on an empty batch".into()));
    }
    let shards = shard_batch(samples, group);
    let results = exec.map(shards.clone(), |idx| -> Result<BatchGrads<S>> {
        let part: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        shard_gradients(model, &part, mask, &LocalExperts)
    });
    let mut total: Option<BatchGrads<S>> = None;
    for r in results {
        let r = r?;
        match &mut total {
            None => total = Some(r),
            Some(acc) => acc.absorb(r),
        }
    }
    let total = total.expect("at least one worker");
    let scale = S::lit(1.0 / samples.len() as f64);
    let grads = total
        .grads
        .into_iter()
        .map(|(k, mut g)| {
            g.scale_in_place(scale);
            (k, g)
        })
        .collect();
    Ok(DataParallelStep {
        grads,
        loss_mean: total.loss_sum / samples.len() as f64,
        aux_mean: total.aux_sum / samples.len() as f64,
        shards,
    })
}
