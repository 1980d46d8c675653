//! Staged training: base LM pretraining, connector alignment, per-task
//! expert tuning with merged adapters, and joint MoE tuning.

use std::collections::BTreeMap;
use std::fmt;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StageConfig};
use crate::connectors::Modality;
use crate::data::{eval_split, generate_synthetic_batch, sample_seed, Sample, SyntheticTask, World};
use crate::error::{Error, Result};
use crate::lora::{attach_adapters, merge_all, LoraSpec};
use crate::model::{init_ffn, ExpertSource, UniMoe};
use crate::moe::{ExpertBackend, LocalExperts};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::parallel::{data_parallel_step, ParallelConfig, WorkerGroup};
use crate::params::TrainMask;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Language-model pretraining of the dense decoder on text.
    Base,
    /// Connectors only.
    Align,
    /// Adapters on the dense FFNs plus projections, one run per task.
    Experts,
    /// Adapters, routers and projections of the sparse model.
    Moe,
}

impl Stage {
    pub fn index(self) -> u8 {
        match self {
            Stage::Base => 0,
            Stage::Align => 1,
            Stage::Experts => 2,
            Stage::Moe => 3,
        }
    }

    fn default_lr(self) -> f64 {
        match self {
            Stage::Base => 1e-3,
            Stage::Align => 2e-5,
            Stage::Experts | Stage::Moe => 4e-5,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage{}", self.index())
    }
}

/// Resolved settings of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingStageSpec {
    pub stage: Stage,
    pub task: SyntheticTask,
    /// Globs of trainable parameters.
    pub trainable: Vec<String>,
    pub lr: f64,
    /// `(glob, lr)` overrides, first match wins.
    pub group_lr: Vec<(String, f64)>,
    pub batch: usize,
    pub steps: u64,
    pub weight_decay: f64,
}

impl TrainingStageSpec {
    pub fn new(stage: Stage, task: SyntheticTask, trainable: &[&str], cfg: &StageConfig) -> Self {
        Self {
            stage,
            task,
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            lr: cfg.lr.unwrap_or(stage.default_lr()),
            group_lr: cfg.group_lr.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            batch: cfg.batch,
            steps: cfg.steps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn mask(&self) -> TrainMask {
        let pats: Vec<&str> = self.trainable.iter().map(String::as_str).collect();
        TrainMask::of(&pats)
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        self.group_lr
            .iter()
            .find(|(p, _)| crate::params::glob_match(p, name))
            .map(|&(_, lr)| lr)
            .unwrap_or(self.lr)
    }
}

/// One record per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub step: u64,
    pub loss: f64,
    pub aux_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean per-sample cross-entropy.
    pub ce: f64,
    /// Fraction of samples whose greedy answer matches exactly.
    pub exact_match: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub task: String,
    pub steps: u64,
    pub initial: EvalMetrics,
    #[serde(rename = "final")]
    pub last: EvalMetrics,
    /// Fingerprints of every non-trainable parameter before and after.
    pub frozen_before: String,
    pub frozen_after: String,
    pub log: Vec<StepRecord>,
}

impl StageReport {
    pub fn frozen_intact(&self) -> bool {
        self.frozen_before == self.frozen_after
    }
}

/// Summed losses and gradients of a set of samples.
#[derive(Debug, Clone)]
pub struct BatchGrads<S: Real> {
    pub loss_sum: f64,
    pub aux_sum: f64,
    pub grads: BTreeMap<String, Tensor<S>>,
    pub samples: usize,
}

impl<S: Real> BatchGrads<S> {
    /// Adds another shard's sums into this one.
    pub fn absorb(&mut self, other: BatchGrads<S>) {
        self.loss_sum += other.loss_sum;
        self.aux_sum += other.aux_sum;
        self.samples += other.samples;
        for (k, g) in other.grads {
            match self.grads.get_mut(&k) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.grads.insert(k, g);
                }
            }
        }
    }
}

/// Forward/backward of `Σ loss` over the samples on one tape.
pub fn shard_gradients<S: Real>(
    model: &UniMoe<S>,
    samples: &[&Sample],
    mask: &TrainMask,
    backend: &dyn ExpertBackend<S>,
) -> Result<BatchGrads<S>> {
    if samples.is_empty() {
        return Ok(BatchGrads {
            loss_sum: 0.0,
            aux_sum: 0.0,
            grads: BTreeMap::new(),
            samples: 0,
        });
    }
    let mut s = model.session(mask);
    let mut total = None;
    let mut aux_sum = 0.0;
    for sample in samples {
        let out = model.forward_sample(&mut s, sample, backend)?;
        if let Some(a) = out.aux {
            aux_sum += s.g.value(a).item().to_f64_lossy();
        }
        total = Some(match total {
            None => out.loss,
            Some(t) => s.g.add(t, out.loss)?,
        });
    }
    let total = total.expect("non-empty shard");
    let loss_sum = s.g.value(total).item().to_f64_lossy();
    let grads = s.g.backward(total)?;
    Ok(BatchGrads {
        loss_sum,
        aux_sum,
        grads: s.g.param_grads(&grads),
        samples: samples.len(),
    })
}

/// Mean gradient of a batch on a single worker.
pub fn batch_gradients<S: Real>(model: &UniMoe<S>, samples: &[Sample], mask: &TrainMask) -> Result<BatchGrads<S>> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut g = shard_gradients(model, &refs, mask, &LocalExperts)?;
    let scale = S::lit(1.0 / samples.len() as f64);
    for t in g.grads.values_mut() {
        t.scale_in_place(scale);
    }
    Ok(g)
}

fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced cross-entropy and greedy exact match. With causal
/// attention and per-token routing, greedy decoding of the two answer
/// tokens agrees with the teacher-forced argmax whenever the first token is
/// right, so one forward pass per sample suffices.
pub fn evaluate<S: Real>(model: &UniMoe<S>, samples: &[Sample], backend: &dyn ExpertBackend<S>) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Invalid("evaluate on an empty split".into()));
    }
    let mask = TrainMask::none();
    let mut ce = 0.0;
    let mut hits = 0usize;
    for sample in samples {
        let mut s = model.session(&mask);
        let out = model.forward_sample(&mut s, sample, backend)?;
        ce += s.g.value(out.ce).item().to_f64_lossy();
        let logits = s.g.value(out.logits);
        let ok = out
            .targets
            .iter()
            .enumerate()
            .filter_map(|(t, tgt)| tgt.map(|id| (t, id)))
            .all(|(t, id)| argmax(logits.row(t)) == id);
        hits += ok as usize;
    }
    let n = samples.len();
    Ok(EvalMetrics {
        ce: ce / n as f64,
        exact_match: hits as f64 / n as f64,
        samples: n,
    })
}

pub fn evaluate_task<S: Real>(model: &UniMoe<S>, task: &SyntheticTask, world: &World) -> Result<EvalMetrics> {
    evaluate(model, &eval_split(task, world)?, &LocalExperts)
}

fn tag_hash(tag: &str) -> u64 {
    tag.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3))
}

/// Seed of the training batch drawn at `step` of the run named `tag`.
pub fn batch_seed(seed: u64, tag: &str, step: u64) -> u64 {
    sample_seed(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ tag_hash(tag), step)
}

pub fn stage_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag_hash(tag).rotate_left(17))
}

fn frozen_fingerprint<S: Real>(model: &UniMoe<S>, mask: &TrainMask) -> String {
    model.store.fingerprint(|n| !mask.trains(&model.store, n))
}

/// Runs the optimizer loop of one stage and evaluates before and after.
pub fn run_stage<S: Real>(
    model: &mut UniMoe<S>,
    spec: &TrainingStageSpec,
    world: &World,
    seed: u64,
    parallel: &ParallelConfig,
) -> Result<StageReport> {
    let tag = format!("{}:{}", spec.stage, spec.task.name);
    let mask = spec.mask();
    let group = WorkerGroup::from_config(parallel, model.config.experts)?;
    let eval = eval_split(&spec.task, world)?;
    let initial = evaluate(model, &eval, &LocalExperts)?;
    let frozen_before = frozen_fingerprint(model, &mask);
    info!("{tag}: initial ce {:.4} em {:.3}", initial.ce, initial.exact_match);
    let mut opt = OptimizerState::new(
        AdamWConfig {
            weight_decay: spec.weight_decay,
            ..AdamWConfig::default()
        },
        spec.steps,
    );
    let mut log = Vec::with_capacity(spec.steps as usize);
    for step in 0..spec.steps {
        let batch = generate_synthetic_batch(&spec.task, world, spec.batch, batch_seed(seed, &tag, step))?;
        let dp = data_parallel_step(model, &batch, &group, &mask, parallel.exec)?;
        if !dp.loss_mean.is_finite() {
            return Err(Error::Numeric(format!("{tag}: non-finite loss at step {step}")));
        }
        let lr = spec.lr * opt.lr_factor();
        opt.step(&mut model.store, &dp.grads, |n| spec.lr_for(n))?;
        debug!("{tag} step {step}: loss {:.5}", dp.loss_mean);
        log.push(StepRecord {
            stage: spec.stage.to_string(),
            step,
            loss: dp.loss_mean,
            aux_loss: dp.aux_mean,
            lr,
        });
    }
    let last = evaluate(model, &eval, &LocalExperts)?;
    info!("{tag}: final ce {:.4} em {:.3}", last.ce, last.exact_match);
    Ok(StageReport {
        stage: spec.stage.to_string(),
        task: spec.task.name.clone(),
        steps: spec.steps,
        initial,
        last,
        frozen_before,
        frozen_after: frozen_fingerprint(model, &mask),
        log,
    })
}

pub fn base_spec(cfg: &RunConfig) -> Result<TrainingStageSpec> {
    Ok(TrainingStageSpec::new(
        Stage::Base,
        SyntheticTask::named("text")?,
        &["llm.*"],
        &cfg.stage0,
    ))
}

pub fn align_spec(cfg: &RunConfig) -> Result<TrainingStageSpec> {
    Ok(TrainingStageSpec::new(
        Stage::Align,
        SyntheticTask::named("caption")?,
        &["qf.*", "proj.*"],
        &cfg.stage1,
    ))
}

pub fn stage2_config<'a>(cfg: &'a RunConfig, task: &str) -> Result<&'a StageConfig> {
    cfg.stage2
        .get(task)
        .ok_or_else(|| Error::Config(format!("no [stage2.{task}] section")))
}

pub fn experts_spec(cfg: &RunConfig, task: &str) -> Result<TrainingStageSpec> {
    let st = stage2_config(cfg, task)?;
    let t = SyntheticTask::named(task)?;
    let mut trainable = vec!["*.lora_A".to_string(), "*.lora_B".to_string(), "proj.*".to_string()];
    if st.train_qformer {
        for m in t.mix.iter().filter(|m| m.uses_qformer()) {
            trainable.push(format!("qf.{m}.*"));
        }
    }
    let pats: Vec<&str> = trainable.iter().map(String::as_str).collect();
    Ok(TrainingStageSpec::new(Stage::Experts, t, &pats, st))
}

pub fn moe_spec(cfg: &RunConfig) -> Result<TrainingStageSpec> {
    Ok(TrainingStageSpec::new(
        Stage::Moe,
        SyntheticTask::named("mixed")?,
        &["*.lora_A", "*.lora_B", "*.moe.router", "proj.*"],
        &cfg.stage3,
    ))
}

pub fn stage0_base<S: Real>(model: &mut UniMoe<S>, cfg: &RunConfig, world: &World, seed: u64) -> Result<StageReport> {
    if !model.is_dense() {
        return Err(Error::Invalid("base pretraining expects the dense model".into()));
    }
    run_stage(model, &base_spec(cfg)?, world, seed, &cfg.parallel)
}

pub fn stage1_align<S: Real>(model: &mut UniMoe<S>, cfg: &RunConfig, world: &World, seed: u64) -> Result<StageReport> {
    if !model.is_dense() {
        return Err(Error::Invalid("alignment expects the dense model".into()));
    }
    run_stage(model, &align_spec(cfg)?, world, seed, &cfg.parallel)
}

/// Tunes adapters on every dense FFN for one task, then merges them. The
/// returned model carries the specialized FFNs.
pub fn stage2_experts<S: Real>(
    stage1: &UniMoe<S>,
    task: &str,
    cfg: &RunConfig,
    world: &World,
    seed: u64,
) -> Result<(UniMoe<S>, StageReport)> {
    if !stage1.is_dense() || !stage1.adapters.is_empty() {
        return Err(Error::Invalid("expert tuning expects the merged dense model".into()));
    }
    let st = stage2_config(cfg, task)?;
    let spec = experts_spec(cfg, task)?;
    let mut model = stage1.clone();
    let lora = LoraSpec::new(st.lora_rank.unwrap_or(64), st.lora_alpha.unwrap_or(16.0))?;
    let mut rng = stage_rng(seed, &format!("stage2:{task}:lora"));
    let targets = model.ffn_weights();
    attach_adapters(&mut model.store, &mut model.adapters, &targets, lora, &mut rng)?;
    let report = run_stage(&mut model, &spec, world, seed, &cfg.parallel)?;
    merge_all(&mut model.store, &mut model.adapters)?;
    Ok((model, report))
}

/// Parses stage-3 expert source names against the available stage-2 runs.
pub fn expert_sources(cfg: &RunConfig, pure: bool) -> Result<Vec<ExpertSource>> {
    let m = cfg.model.experts;
    if pure {
        return Ok(vec![ExpertSource::BaseCopy; m]);
    }
    let names = match &cfg.stage3.experts {
        Some(v) => v.clone(),
        None => {
            let mut v = vec!["base".to_string()];
            v.extend(cfg.stage2.keys().cloned());
            v
        }
    };
    if names.len() != m {
        return Err(Error::Config(format!("{} expert sources for {m} experts", names.len())));
    }
    names
        .into_iter()
        .map(|n| match n.as_str() {
            "base" => Ok(ExpertSource::BaseCopy),
            "random" => Ok(ExpertSource::Random),
            t if cfg.stage2.contains_key(t) => Ok(ExpertSource::Stage2(t.to_string())),
            t => Err(Error::Config(format!(
                "expert source `{t}` is neither base, random nor a stage-2 task"
            ))),
        })
        .collect()
}

/// Builds the sparse model from the aligned dense model and the stage-2
/// results: experts copy their source FFNs, projections (and any tuned
/// Q-Former) come from the stage-2 run that covered their modality.
pub fn build_moe<S: Real>(
    stage1: &UniMoe<S>,
    sources: &[ExpertSource],
    stage2: &BTreeMap<String, UniMoe<S>>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<UniMoe<S>> {
    let mut base = stage1.clone();
    for (task, tuned) in stage2 {
        let spec = experts_spec(cfg, task)?;
        let mask = spec.mask();
        let covered: Vec<Modality> = spec.task.mix.clone();
        for (name, p) in tuned.store.iter() {
            let modal = covered.iter().any(|m| {
                let proj = m.projection().unwrap_or("");
                name.starts_with(&format!("proj.{proj}.")) || name.starts_with(&format!("qf.{proj}."))
            });
            if modal && mask.matches(name) {
                *base.store.get_mut(name)? = p.value.clone();
            }
        }
    }
    let mut rng = stage_rng(seed, "stage3:init");
    let mut randoms: Vec<crate::params::ParamStore<S>> = Vec::new();
    for src in sources {
        if *src == ExpertSource::Random {
            let mut st = crate::params::ParamStore::new();
            for l in 0..cfg.model.layers {
                init_ffn(
                    &mut st,
                    &crate::model::ffn_prefix(l),
                    cfg.model.width,
                    cfg.model.ffn,
                    &mut rng,
                );
            }
            randoms.push(st);
        }
    }
    let mut random_iter = randoms.iter();
    let mut stores = Vec::with_capacity(sources.len());
    for src in sources {
        let st = match src {
            ExpertSource::BaseCopy => &stage1.store,
            ExpertSource::Random => random_iter.next().expect("one store per random source"),
            ExpertSource::Stage2(t) => {
                &stage2
                    .get(t)
                    .ok_or_else(|| Error::Invalid(format!("missing stage-2 result for `{t}`")))?
                    .store
            }
        };
        stores.push((src.clone(), st));
    }
    base.upcycle(&stores, &mut rng)?;
    Ok(base)
}

/// Attaches fresh stage-3 adapters and trains adapters, routers and
/// projections on the mixed task.
pub fn stage3_moe<S: Real>(model: &mut UniMoe<S>, cfg: &RunConfig, world: &World, seed: u64) -> Result<StageReport> {
    if model.is_dense() && model.config.experts > 1 {
        return Err(Error::Invalid("stage 3 expects an upcycled model".into()));
    }
    if model.experts.len() != model.config.experts && !model.is_dense() {
        return Err(Error::Config(format!(
            "model has {} expert sources for {} experts",
            model.experts.len(),
            model.config.experts
        )));
    }
    attach_stage3_adapters(model, &cfg.stage3, seed)?;
    run_stage(model, &moe_spec(cfg)?, world, seed, &cfg.parallel)
}

pub fn attach_stage3_adapters<S: Real>(model: &mut UniMoe<S>, st: &StageConfig, seed: u64) -> Result<()> {
    let lora = LoraSpec::new(st.lora_rank.unwrap_or(8), st.lora_alpha.unwrap_or(16.0))?;
    let mut targets = model.ffn_weights();
    if st.attn_lora {
        targets.extend(model.attention_weights());
    }
    let mut rng = stage_rng(seed, "stage3:lora");
    attach_adapters(&mut model.store, &mut model.adapters, &targets, lora, &mut rng)
}

/// Every stage in order. Returns the final sparse model and the reports of
/// stage 0, stage 1, each stage-2 task and stage 3.
pub struct Pipeline<S: Real> {
    pub stage1: UniMoe<S>,
    pub stage2: BTreeMap<String, UniMoe<S>>,
    pub stage3: UniMoe<S>,
    pub reports: Vec<StageReport>,
}

pub fn run_pipeline<S: Real>(cfg: &RunConfig, seed: u64, pure_experts: bool) -> Result<Pipeline<S>> {
    let world = World::new(&cfg.data, &cfg.connectors);
    let mut rng = stage_rng(seed, "init");
    let mut model = UniMoe::<S>::init_dense(&cfg.model, &cfg.connectors, &mut rng)?;
    let mut reports = vec![stage0_base(&mut model, cfg, &world, seed)?];
    reports.push(stage1_align(&mut model, cfg, &world, seed)?);
    let mut stage2 = BTreeMap::new();
    let sources = expert_sources(cfg, pure_experts)?;
    if !pure_experts {
        for task in cfg.stage2.keys() {
            let (tuned, report) = stage2_experts(&model, task, cfg, &world, seed)?;
            reports.push(report);
            stage2.insert(task.clone(), tuned);
        }
    }
    let mut sparse = build_moe(&model, &sources, &stage2, cfg, seed)?;
    reports.push(stage3_moe(&mut sparse, cfg, &world, seed)?);
    Ok(Pipeline {
        stage1: model,
        stage2,
        stage3: sparse,
        reports,
    })
}
