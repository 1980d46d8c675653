//! The full model: connectors feeding a decoder stack whose FFN layers are
//! dense or sparse MoE according to the layer layout.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::connectors::{self, ConnectorConfig, Modality};
use crate::data::{RawInput, Sample, BOS, SEP};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::moe::routing::{aux_balance_loss_graph, route_graph, RoutedVars, RoutingDecision};
use crate::moe::{combine_slots, ExpertBackend, LayerLayout, ModelConfig};
use crate::nn::{session_attention, session_ffn, ATTN_MATRICES, FFN_MATRICES};
use crate::params::{ParamStore, Session, TrainMask};
use crate::tensor::{Real, Tensor};

/// Std of the router weights at init.
pub const ROUTER_STD: f64 = 0.02;
pub const LM_HEAD_STD: f64 = 0.02;
pub const POS_EMB_STD: f64 = 0.1;

pub fn layer_prefix(l: usize) -> String {
    format!("llm.layers.{l}")
}

pub fn ffn_prefix(l: usize) -> String {
    format!("llm.layers.{l}.ffn")
}

pub fn router_name(l: usize) -> String {
    format!("llm.layers.{l}.moe.router")
}

pub fn expert_prefix(l: usize, e: usize) -> String {
    format!("llm.layers.{l}.moe.experts.{e}")
}

/// Where an expert's base weights came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "task", rename_all = "snake_case")]
pub enum ExpertSource {
    /// Merged output of a stage-2 task.
    Stage2(String),
    /// Copy of the dense base FFN.
    BaseCopy,
    Random,
}

impl std::fmt::Display for ExpertSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExpertSource::Stage2(t) => write!(f, "stage2:{t}"),
            ExpertSource::BaseCopy => f.write_str("base-copy"),
            ExpertSource::Random => f.write_str("random"),
        }
    }
}

fn gaussian<S: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

fn insert_ln<S: Real>(store: &mut ParamStore<S>, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[d], S::one()), false);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]), false);
}

pub fn init_ffn<S: Real, R: Rng + ?Sized>(store: &mut ParamStore<S>, prefix: &str, d: usize, f: usize, rng: &mut R) {
    store.insert(format!("{prefix}.w_gate"), gaussian(d, f, rng), false);
    store.insert(format!("{prefix}.w_up"), gaussian(d, f, rng), false);
    store.insert(format!("{prefix}.w_down"), gaussian(f, d, rng), false);
}

/// Decoder parameters for the given layout. MoE layers get a router and `M`
/// independently initialized experts.
pub fn init_llm<S: Real, R: Rng + ?Sized>(cfg: &ModelConfig, layout: &LayerLayout, store: &mut ParamStore<S>, rng: &mut R) {
    let (d, f) = (cfg.width, cfg.ffn);
    store.insert("llm.tok_emb", Tensor::randn(&[cfg.vocab, d], 1.0, rng), false);
    store.insert("llm.pos_emb", Tensor::randn(&[cfg.max_len, d], POS_EMB_STD, rng), false);
    for l in 0..cfg.layers {
        let p = layer_prefix(l);
        insert_ln(store, &format!("{p}.ln1"), d);
        for w in ATTN_MATRICES {
            store.insert(format!("{p}.attn.{w}"), gaussian(d, d, rng), false);
        }
        insert_ln(store, &format!("{p}.ln2"), d);
        if layout.is_moe[l] {
            store.insert(router_name(l), Tensor::randn(&[d, cfg.experts], ROUTER_STD, rng), false);
            for e in 0..cfg.experts {
                init_ffn(store, &expert_prefix(l, e), d, f, rng);
            }
        } else {
            init_ffn(store, &ffn_prefix(l), d, f, rng);
        }
        insert_ln(store, &format!("{p}.ln_out"), d);
    }
    store.insert("llm.lm_head", Tensor::randn(&[d, cfg.vocab], LM_HEAD_STD, rng), false);
}

/// Routing produced by one MoE layer during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerRouting<S> {
    pub layer: usize,
    pub vars: RoutedVars,
    pub decision: RoutingDecision<S>,
}

/// Sparse FFN of layer `l` over pre-normalized tokens `h`.
pub fn moe_ffn<S: Real>(
    s: &mut Session<'_, S>,
    h: Var,
    l: usize,
    cfg: &ModelConfig,
    backend: &dyn ExpertBackend<S>,
) -> Result<(Var, LayerRouting<S>)> {
    let router = s.p(&router_name(l))?;
    let (vars, decision) = route_graph(&mut s.g, h, router, cfg.topk)?;
    let experts: Vec<String> = (0..cfg.experts).map(|e| expert_prefix(l, e)).collect();
    let stacked = backend.expert_outputs(s, h, &decision, &experts)?;
    let out = combine_slots(s, stacked, vars.gates, decision.tokens(), cfg.topk)?;
    Ok((
        out,
        LayerRouting {
            layer: l,
            vars,
            decision,
        },
    ))
}

/// Pre-norm attention and FFN sub-blocks with residuals, then the block's
/// output LayerNorm.
pub fn block_forward<S: Real>(
    s: &mut Session<'_, S>,
    x: Var,
    l: usize,
    is_moe: bool,
    cfg: &ModelConfig,
    backend: &dyn ExpertBackend<S>,
) -> Result<(Var, Option<LayerRouting<S>>)> {
    let p = layer_prefix(l);
    let h = s.layer_norm(x, &format!("{p}.ln1"))?;
    let a = session_attention(s, h, h, &format!("{p}.attn"), cfg.heads, true)?;
    let xs = s.g.add(x, a)?;
    let h = s.layer_norm(xs, &format!("{p}.ln2"))?;
    let (f, routing) = if is_moe {
        let (f, r) = moe_ffn(s, h, l, cfg, backend)?;
        (f, Some(r))
    } else {
        (session_ffn(s, h, &ffn_prefix(l))?, None)
    };
    let xm = s.g.add(xs, f)?;
    Ok((s.layer_norm(xm, &format!("{p}.ln_out"))?, routing))
}

pub struct LmOutput<S> {
    pub logits: Var,
    pub routing: Vec<LayerRouting<S>>,
    /// Mean balancing loss over MoE layers; `None` without MoE layers.
    pub aux: Option<Var>,
}

/// Adds position embeddings to `x0`, runs the block stack and the LM head.
pub fn forward_lm<S: Real>(
    s: &mut Session<'_, S>,
    x0: Var,
    cfg: &ModelConfig,
    layout: &LayerLayout,
    backend: &dyn ExpertBackend<S>,
) -> Result<LmOutput<S>> {
    let t = s.g.value(x0).rows();
    if t > cfg.max_len {
        return Err(Error::Invalid(format!(
            "sequence of {t} tokens exceeds max_len {}",
            cfg.max_len
        )));
    }
    if layout.is_moe.len() != cfg.layers {
        return Err(Error::Config(format!(
            "layout has {} layers, config {}",
            layout.is_moe.len(),
            cfg.layers
        )));
    }
    let pos = s.p("llm.pos_emb")?;
    let pos = s.g.slice_rows(pos, 0, t)?;
    let mut x = s.g.add(x0, pos)?;
    let mut routing = Vec::new();
    for l in 0..cfg.layers {
        let (y, r) = block_forward(s, x, l, layout.is_moe[l], cfg, backend)?;
        x = y;
        routing.extend(r);
    }
    let head = s.p("llm.lm_head")?;
    let logits = s.g.matmul(x, head)?;
    let aux = if routing.is_empty() {
        None
    } else {
        let mut terms = Vec::with_capacity(routing.len());
        for r in &routing {
            terms.push(aux_balance_loss_graph(
                &mut s.g,
                r.vars.probs,
                &r.decision,
                cfg.aux_loss_coeff,
            )?);
        }
        let mut total = terms[0];
        for &term in &terms[1..] {
            total = s.g.add(total, term)?;
        }
        Some(s.g.scale(total, S::lit(1.0 / terms.len() as f64)))
    };
    Ok(LmOutput { logits, routing, aux })
}

/// Embeds a sample's modality block through its connector.
pub fn embed_raw<S: Real>(s: &mut Session<'_, S>, raw: &RawInput, cc: &ConnectorConfig) -> Result<Var> {
    let cast = |t: &Tensor<f64>| t.cast::<S>();
    match raw {
        RawInput::Image(t) => connectors::session_image(s, &cast(t)),
        RawInput::Video(frames) => {
            let frames: Vec<Tensor<S>> = frames.iter().map(cast).collect();
            connectors::session_video(s, &frames)
        }
        RawInput::Audio(t) => connectors::session_audio_like(s, &cast(t), "audio", cc.qformer_heads),
        RawInput::Speech(t) => connectors::session_audio_like(s, &cast(t), "speech", cc.qformer_heads),
        RawInput::Text(ids) => embed_tokens(s, ids),
    }
}

pub fn embed_tokens<S: Real>(s: &mut Session<'_, S>, ids: &[usize]) -> Result<Var> {
    let table = s.p("llm.tok_emb")?;
    s.g.gather_rows(table, ids)
}

/// Assembled input of one sample: `[BOS] [modality block] [instr SEP a₀]`.
pub struct SampleInput {
    pub x0: Var,
    pub labels: Vec<Modality>,
    /// Next-token targets; only the SEP and answer positions are scored.
    pub targets: Vec<Option<usize>>,
}

pub fn sample_input<S: Real>(s: &mut Session<'_, S>, sample: &Sample, cc: &ConnectorConfig) -> Result<SampleInput> {
    let head = embed_tokens(s, &[BOS])?;
    let body = embed_raw(s, &sample.raw, cc)?;
    let tail = embed_tokens(s, &[sample.instruction, SEP, sample.answer[0]])?;
    let x0 = s.g.concat_rows(&[head, body, tail])?;
    let n_body = s.g.value(body).rows();
    let t = 1 + n_body + 3;
    let mut labels = vec![Modality::Text];
    labels.extend(std::iter::repeat_n(sample.modality(), n_body));
    labels.extend([Modality::Text; 3]);
    let mut targets = vec![None; t];
    targets[t - 2] = Some(sample.answer[0]);
    targets[t - 1] = Some(sample.answer[1]);
    Ok(SampleInput { x0, labels, targets })
}

/// Model parameters plus everything needed to rebuild the forward pass.
#[derive(Debug, Clone)]
pub struct UniMoe<S: Real> {
    pub config: ModelConfig,
    pub connectors: ConnectorConfig,
    pub layout: LayerLayout,
    pub store: ParamStore<S>,
    pub adapters: AdapterSet,
    /// One source per expert slot; empty for a dense model.
    pub experts: Vec<ExpertSource>,
}

pub struct SampleOutput<S> {
    pub loss: Var,
    pub ce: Var,
    pub logits: Var,
    pub labels: Vec<Modality>,
    pub targets: Vec<Option<usize>>,
    pub routing: Vec<LayerRouting<S>>,
    pub aux: Option<Var>,
}

impl<S: Real> UniMoe<S> {
    /// Dense decoder (every FFN layer dense) plus connectors.
    pub fn init_dense<R: Rng + ?Sized>(config: &ModelConfig, cc: &ConnectorConfig, rng: &mut R) -> Result<Self> {
        Self::init_with_layout(config, cc, LayerLayout::dense(config.layers), rng)
    }

    /// Model with the configured MoE layout and randomly initialized experts.
    pub fn init_moe<R: Rng + ?Sized>(config: &ModelConfig, cc: &ConnectorConfig, rng: &mut R) -> Result<Self> {
        let mut m = Self::init_with_layout(config, cc, config.layout(), rng)?;
        if m.layout.moe_layers() > 0 {
            m.experts = vec![ExpertSource::Random; config.experts];
        }
        Ok(m)
    }

    fn init_with_layout<R: Rng + ?Sized>(
        config: &ModelConfig,
        cc: &ConnectorConfig,
        layout: LayerLayout,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        cc.validate()?;
        let mut store = ParamStore::new();
        init_llm(config, &layout, &mut store, rng);
        connectors::init_connectors(cc, config.width, &mut store, rng);
        Ok(Self {
            config: config.clone(),
            connectors: cc.clone(),
            layout,
            store,
            adapters: AdapterSet::new(),
            experts: Vec::new(),
        })
    }

    pub fn is_dense(&self) -> bool {
        self.layout.moe_layers() == 0
    }

    pub fn session<'a>(&'a self, mask: &'a TrainMask) -> Session<'a, S> {
        Session::new(&self.store, &self.adapters, mask)
    }

    pub fn forward_sample(
        &self,
        s: &mut Session<'_, S>,
        sample: &Sample,
        backend: &dyn ExpertBackend<S>,
    ) -> Result<SampleOutput<S>> {
        let input = sample_input(s, sample, &self.connectors)?;
        let out = forward_lm(s, input.x0, &self.config, &self.layout, backend)?;
        let ce = s.g.cross_entropy(out.logits, &input.targets)?;
        let loss = match out.aux {
            Some(a) if self.config.aux_loss_coeff > 0.0 => s.g.add(ce, a)?,
            _ => ce,
        };
        Ok(SampleOutput {
            loss,
            ce,
            logits: out.logits,
            labels: input.labels,
            targets: input.targets,
            routing: out.routing,
            aux: out.aux,
        })
    }

    /// Replaces the dense FFN of every layer flagged MoE by the configured
    /// layout with `M` experts. Expert `e` copies the layer's FFN out of
    /// `sources[e].1`; the router is freshly initialized.
    pub fn upcycle<R: Rng + ?Sized>(&mut self, sources: &[(ExpertSource, &ParamStore<S>)], rng: &mut R) -> Result<()> {
        if !self.is_dense() {
            return Err(Error::Invalid("model is already sparse".into()));
        }
        if !self.adapters.is_empty() {
            return Err(Error::Invalid("merge adapters before upcycling".into()));
        }
        if sources.len() != self.config.experts {
            return Err(Error::Config(format!(
                "{} expert sources for {} experts",
                sources.len(),
                self.config.experts
            )));
        }
        let layout = self.config.layout();
        for l in layout.moe_indices() {
            let base = ffn_prefix(l);
            for (e, (_, src)) in sources.iter().enumerate() {
                for m in FFN_MATRICES {
                    let w = src.get(&format!("{base}.{m}"))?.clone();
                    if w.shape() != self.store.get(&format!("{base}.{m}"))?.shape() {
                        return Err(Error::shape(
                            "upcycle",
                            w.shape(),
                            self.store.get(&format!("{base}.{m}"))?.shape(),
                        ));
                    }
                    self.store.insert(format!("{}.{m}", expert_prefix(l, e)), w, false);
                }
            }
            for m in FFN_MATRICES {
                self.store.remove(&format!("{base}.{m}"));
            }
            self.store.insert(
                router_name(l),
                Tensor::randn(&[self.config.width, self.config.experts], ROUTER_STD, rng),
                false,
            );
        }
        self.layout = layout;
        self.experts = sources.iter().map(|(src, _)| src.clone()).collect();
        Ok(())
    }

    /// Names of the FFN weight matrices in every layer (dense FFN or
    /// experts), in layer order.
    pub fn ffn_weights(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.config.layers {
            let prefixes: Vec<String> = if self.layout.is_moe[l] {
                (0..self.config.experts).map(|e| expert_prefix(l, e)).collect()
            } else {
                vec![ffn_prefix(l)]
            };
            for p in prefixes {
                out.extend(FFN_MATRICES.iter().map(|m| format!("{p}.{m}")));
            }
        }
        out
    }

    pub fn attention_weights(&self) -> Vec<String> {
        (0..self.config.layers)
            .flat_map(|l| ATTN_MATRICES.iter().map(move |w| format!("{}.attn.{w}", layer_prefix(l))))
            .collect()
    }

    /// Parameter counts by top-level group (`llm`, `enc`, `proj`, `qf`).
    pub fn group_sizes(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, p) in self.store.iter() {
            let group = name.split('.').next().unwrap_or("").to_string();
            *out.entry(group).or_insert(0) += p.value.len();
        }
        out
    }
}
