mod common;

use std::collections::BTreeMap;

use common::rng;
use umoe_core::config::{RunConfig, StageConfig};
use umoe_core::connectors::Modality;
use umoe_core::data::{eval_split, generate_synthetic_batch, task_shift, RawInput, SyntheticTask, World, CAP, CLASS_BASE, EOS};
use umoe_core::model::{ExpertSource, UniMoe};
use umoe_core::moe::LocalExperts;
use umoe_core::optim::{AdamWConfig, OptimizerState};
use umoe_core::params::TrainMask;
use umoe_core::train::{
    align_spec, attach_stage3_adapters, batch_gradients, build_moe, evaluate, expert_sources, experts_spec, moe_spec, run_stage,
    stage1_align, stage2_experts, stage3_moe, Stage, TrainingStageSpec,
};
use umoe_core::Error;

fn quick(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::toy();
    for st in [&mut cfg.stage0, &mut cfg.stage1, &mut cfg.stage3] {
        st.steps = steps;
        st.batch = 4;
        st.lr = Some(3e-3);
    }
    for st in cfg.stage2.values_mut() {
        st.steps = steps;
        st.batch = 4;
        st.lr = Some(3e-3);
    }
    cfg.data.eval_samples = 16;
    cfg
}

fn dense(cfg: &RunConfig, seed: u64) -> UniMoe<f32> {
    UniMoe::init_dense(&cfg.model, &cfg.connectors, &mut rng(seed)).unwrap()
}

fn world(cfg: &RunConfig) -> World {
    World::new(&cfg.data, &cfg.connectors)
}

#[test]
fn stage_masks() {
    let cfg = RunConfig::toy();
    let store_names = [
        "enc.image.w",
        "proj.image.w",
        "qf.audio.queries",
        "llm.layers.0.ffn.w_up",
        "llm.layers.0.ffn.w_up.lora_A",
        "llm.layers.1.moe.router",
        "llm.lm_head",
    ];
    let trained = |spec: TrainingStageSpec| -> Vec<&str> {
        let m = spec.mask();
        store_names.iter().copied().filter(|n| m.matches(n)).collect()
    };
    assert_eq!(trained(align_spec(&cfg).unwrap()), ["proj.image.w", "qf.audio.queries"]);
    assert_eq!(
        trained(experts_spec(&cfg, "audio").unwrap()),
        ["proj.image.w", "llm.layers.0.ffn.w_up.lora_A"]
    );
    assert_eq!(
        trained(moe_spec(&cfg).unwrap()),
        ["proj.image.w", "llm.layers.0.ffn.w_up.lora_A", "llm.layers.1.moe.router"]
    );

    let mut with_qf = cfg.clone();
    with_qf.stage2.get_mut("audio").unwrap().train_qformer = true;
    assert!(experts_spec(&with_qf, "audio").unwrap().mask().matches("qf.audio.queries"));
    assert!(!experts_spec(&with_qf, "audio").unwrap().mask().matches("qf.speech.queries"));
    assert!(experts_spec(&cfg, "video").is_err());
}

#[test]
fn group_learning_rates() {
    let mut st = StageConfig {
        lr: Some(1e-3),
        ..StageConfig::default()
    };
    st.group_lr.insert("*.moe.router".into(), 5e-3);
    let spec = TrainingStageSpec::new(Stage::Moe, SyntheticTask::named("mixed").unwrap(), &["*"], &st);
    assert_eq!(spec.lr_for("llm.layers.1.moe.router"), 5e-3);
    assert_eq!(spec.lr_for("proj.image.w"), 1e-3);
    let defaults = TrainingStageSpec::new(
        Stage::Align,
        SyntheticTask::named("caption").unwrap(),
        &["*"],
        &StageConfig::default(),
    );
    assert_eq!(defaults.lr, 2e-5);
    let defaults = TrainingStageSpec::new(
        Stage::Experts,
        SyntheticTask::named("image").unwrap(),
        &["*"],
        &StageConfig::default(),
    );
    assert_eq!(defaults.lr, 4e-5);
}

#[test]
fn zero_steps_change_nothing() {
    let cfg = quick(0);
    let w = world(&cfg);
    let mut model = dense(&cfg, 1);
    let before = model.store.fingerprint(|_| true);
    let report = stage1_align(&mut model, &cfg, &w, 0).unwrap();
    assert_eq!(before, model.store.fingerprint(|_| true));
    assert!(report.log.is_empty() && report.frozen_intact());
    assert_eq!(report.initial, report.last);

    let (tuned, _) = stage2_experts(&model, "image", &cfg, &w, 0).unwrap();
    for l in 0..cfg.model.layers {
        for m in ["w_gate", "w_up", "w_down"] {
            let name = format!("llm.layers.{l}.ffn.{m}");
            assert_eq!(tuned.store.get(&name).unwrap(), model.store.get(&name).unwrap());
        }
    }
    assert!(tuned.adapters.is_empty());
}

#[test]
fn alignment_touches_only_connectors() {
    let cfg = quick(200);
    let w = world(&cfg);
    let mut model = dense(&cfg, 2);
    let task = SyntheticTask::new("audio-caption", &[Modality::Audio], true);
    let spec = TrainingStageSpec {
        task,
        ..align_spec(&cfg).unwrap()
    };
    let outside = |n: &str| !(n.starts_with("qf.") || n.starts_with("proj."));
    let before = model.store.fingerprint(outside);
    let connectors_before = model
        .store
        .fingerprint(|n| n.starts_with("qf.audio") || n.starts_with("proj.audio"));
    let report = run_stage(&mut model, &spec, &w, 3, &cfg.parallel).unwrap();
    assert_eq!(before, model.store.fingerprint(outside));
    assert_ne!(
        connectors_before,
        model
            .store
            .fingerprint(|n| n.starts_with("qf.audio") || n.starts_with("proj.audio"))
    );
    assert!(report.frozen_intact());
    assert_eq!(report.log.len(), 200);
    assert!(
        report.last.ce < report.initial.ce,
        "{:?} -> {:?}",
        report.initial,
        report.last
    );
}

#[test]
fn stage_two_runs_are_distinct_and_deterministic() {
    let cfg = quick(8);
    let w = world(&cfg);
    let base = dense(&cfg, 4);
    let ffn = |m: &UniMoe<f32>| m.store.fingerprint(|n| n.contains(".ffn."));
    let (image, r1) = stage2_experts(&base, "image", &cfg, &w, 5).unwrap();
    let (audio, _) = stage2_experts(&base, "audio", &cfg, &w, 5).unwrap();
    let (again, r2) = stage2_experts(&base, "image", &cfg, &w, 5).unwrap();
    assert_ne!(ffn(&image), ffn(&audio));
    assert_ne!(ffn(&image), ffn(&base));
    assert_eq!(image.store.fingerprint(|_| true), again.store.fingerprint(|_| true));
    assert_eq!(r1, r2);
    assert!(r1.frozen_intact());
    // Adapters were merged back; the tuned model is dense with no factors left.
    assert!(image.adapters.is_empty() && image.is_dense());
    assert!(image.store.names().all(|n| !n.contains("lora")));
}

#[test]
fn expert_source_parsing() {
    let cfg = RunConfig::toy();
    assert_eq!(
        expert_sources(&cfg, false).unwrap(),
        vec![
            ExpertSource::BaseCopy,
            ExpertSource::Stage2("audio".into()),
            ExpertSource::Stage2("image".into()),
            ExpertSource::Stage2("speech".into())
        ]
    );
    assert_eq!(expert_sources(&cfg, true).unwrap(), vec![ExpertSource::BaseCopy; 4]);
    let mut bad = cfg.clone();
    bad.stage3.experts = Some(vec!["base".into(), "video".into(), "random".into(), "base".into()]);
    assert!(matches!(expert_sources(&bad, false), Err(Error::Config(_))));
    bad.stage3.experts = Some(vec!["base".into(); 3]);
    assert!(matches!(expert_sources(&bad, false), Err(Error::Config(_))));
}

fn logits_of(model: &UniMoe<f32>, samples: &[umoe_core::data::Sample]) -> Vec<Vec<f32>> {
    let mask = TrainMask::none();
    samples
        .iter()
        .map(|s| {
            let mut sess = model.session(&mask);
            let out = model.forward_sample(&mut sess, s, &LocalExperts).unwrap();
            sess.g.value(out.logits).data().to_vec()
        })
        .collect()
}

#[test]
fn pure_experts_start_equal_to_dense_for_any_topk() {
    let w = world(&RunConfig::toy());
    let batch = generate_synthetic_batch(&SyntheticTask::named("mixed").unwrap(), &w, 6, 9).unwrap();
    for topk in 1..=4 {
        let mut cfg = quick(0);
        cfg.model.topk = topk;
        let base = dense(&cfg, 6);
        let sources = expert_sources(&cfg, true).unwrap();
        let mut sparse = build_moe(&base, &sources, &BTreeMap::new(), &cfg, 7).unwrap();
        assert!(!sparse.is_dense());
        assert_eq!(logits_of(&sparse, &batch), logits_of(&base, &batch), "topk {topk}");
        // Fresh stage-3 adapters keep it that way.
        attach_stage3_adapters(&mut sparse, &cfg.stage3, 0).unwrap();
        assert_eq!(
            logits_of(&sparse, &batch),
            logits_of(&base, &batch),
            "topk {topk} with adapters"
        );
    }
}

#[test]
fn mixture_and_pure_stage_three_runs() {
    let cfg = quick(6);
    let w = world(&cfg);
    let base = dense(&cfg, 8);
    let mut stage2 = BTreeMap::new();
    for task in cfg.stage2.keys() {
        stage2.insert(task.clone(), stage2_experts(&base, task, &cfg, &w, 1).unwrap().0);
    }
    for pure in [false, true] {
        let sources = expert_sources(&cfg, pure).unwrap();
        let store2 = if pure { BTreeMap::new() } else { stage2.clone() };
        let mut sparse = build_moe(&base, &sources, &store2, &cfg, 2).unwrap();
        assert_eq!(sparse.experts, sources);
        let expert_base = |m: &UniMoe<f32>| m.store.fingerprint(|n| n.contains(".moe.experts.") && !n.contains("lora"));
        let before = expert_base(&sparse);
        let report = stage3_moe(&mut sparse, &cfg, &w, 3).unwrap();
        assert!(report.frozen_intact());
        assert_eq!(before, expert_base(&sparse));
        assert_eq!(report.log.len(), 6);
        assert!(report.log.iter().all(|r| r.loss.is_finite() && r.stage == "stage3"));
    }
    // Mixture experts really differ: by default expert 0 is the base copy and
    // the rest follow the stage-2 task names in order, so expert 1 is audio.
    let sources = expert_sources(&cfg, false).unwrap();
    let sparse = build_moe(&base, &sources, &stage2, &cfg, 2).unwrap();
    let l = sparse.layout.moe_indices()[0];
    assert_eq!(
        sparse.store.get(&format!("llm.layers.{l}.moe.experts.1.w_up")).unwrap(),
        stage2["audio"].store.get(&format!("llm.layers.{l}.ffn.w_up")).unwrap()
    );
    assert_ne!(
        sparse.store.get(&format!("llm.layers.{l}.moe.experts.0.w_up")).unwrap(),
        sparse.store.get(&format!("llm.layers.{l}.moe.experts.1.w_up")).unwrap()
    );
}

#[test]
fn stage_three_checks_its_input() {
    let cfg = quick(1);
    let w = world(&cfg);
    let mut base = dense(&cfg, 10);
    assert!(matches!(stage3_moe(&mut base, &cfg, &w, 0), Err(Error::Invalid(_))));
    let sources = expert_sources(&cfg, false).unwrap();
    assert!(build_moe(&base, &sources, &BTreeMap::new(), &cfg, 0).is_err());
    let mut sparse = build_moe(&base, &expert_sources(&cfg, true).unwrap(), &BTreeMap::new(), &cfg, 0).unwrap();
    sparse.experts.pop();
    assert!(matches!(stage3_moe(&mut sparse, &cfg, &w, 0), Err(Error::Config(_))));
}

#[test]
fn single_worker_training_is_deterministic() {
    let cfg = quick(5);
    let w = world(&cfg);
    let run = || {
        let mut m = dense(&cfg, 11);
        let r = stage1_align(&mut m, &cfg, &w, 12).unwrap();
        (m.store.fingerprint(|_| true), r.log)
    };
    assert_eq!(run(), run());
}

#[test]
fn batches_are_deterministic_and_follow_the_mix() {
    let w = world(&RunConfig::toy());
    let mixed = SyntheticTask::named("mixed").unwrap();
    let a = generate_synthetic_batch(&mixed, &w, 20, 1).unwrap();
    assert_eq!(a, generate_synthetic_batch(&mixed, &w, 20, 1).unwrap());
    let hist = |task: &SyntheticTask| {
        let mut h = BTreeMap::new();
        for s in generate_synthetic_batch(task, &w, 20, 1).unwrap() {
            *h.entry(s.modality()).or_insert(0) += 1;
        }
        h
    };
    let h_mixed = hist(&mixed);
    let h_audio = hist(&SyntheticTask::named("audio").unwrap());
    assert_eq!(h_mixed.len(), 5);
    assert_eq!(h_audio, BTreeMap::from([(Modality::Audio, 20)]));
    assert_ne!(h_mixed, h_audio);
}

/// Target class recomputed from the raw features and the world codebooks.
fn class_oracle(w: &World, raw: &RawInput) -> usize {
    let (feature, book): (Vec<f64>, _) = match raw {
        RawInput::Text(ids) => return ids[0] - CLASS_BASE,
        RawInput::Image(t) => (t.data().to_vec(), &w.image),
        RawInput::Video(frames) => {
            let mut acc = vec![0.0; frames[0].len()];
            for f in frames {
                for (a, v) in acc.iter_mut().zip(f.data()) {
                    *a += v;
                }
            }
            (acc.into_iter().map(|v| v / frames.len() as f64).collect(), &w.image)
        }
        RawInput::Audio(t) | RawInput::Speech(t) => {
            let mut acc = vec![0.0; t.cols()];
            for r in 0..t.rows() {
                for (a, v) in acc.iter_mut().zip(t.row(r)) {
                    *a += v / t.rows() as f64;
                }
            }
            let book = if matches!(raw, RawInput::Audio(_)) {
                &w.audio
            } else {
                &w.speech
            };
            (acc, book)
        }
    };
    let scores: Vec<f64> = (0..book.rows())
        .map(|c| book.row(c).iter().zip(&feature).map(|(a, b)| a * b).sum())
        .collect();
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

#[test]
fn emitted_targets_match_the_target_function() {
    let cfg = RunConfig::toy();
    let w = world(&cfg);
    let c = cfg.data.classes;
    for name in ["caption", "mixed", "image", "audio", "speech", "text"] {
        let task = SyntheticTask::named(name).unwrap();
        for s in generate_synthetic_batch(&task, &w, 40, 2).unwrap() {
            let class = class_oracle(&w, &s.raw);
            let shift = if task.aligned { 0 } else { task_shift(s.modality()) };
            assert_eq!(s.answer, [CLASS_BASE + (class + shift) % c, EOS], "{name}");
            if task.aligned {
                assert_eq!(s.instruction, CAP);
            }
        }
    }
}

#[test]
fn untrained_model_is_near_uniform() {
    let cfg = RunConfig::toy();
    let w = world(&cfg);
    let model = dense(&cfg, 13);
    let split = eval_split(&SyntheticTask::named("mixed").unwrap(), &w).unwrap();
    let m1 = evaluate(&model, &split, &LocalExperts).unwrap();
    let m2 = evaluate(&model, &split, &LocalExperts).unwrap();
    assert_eq!(m1, m2);
    assert!((m1.ce - 256f64.ln()).abs() <= 0.2, "ce {}", m1.ce);
    assert!(evaluate(&model, &[], &LocalExperts).is_err());
}

#[test]
fn memorizes_a_small_set() {
    let cfg = RunConfig::toy();
    let w = world(&cfg);
    let mut model = dense(&cfg, 14);
    let set = generate_synthetic_batch(&SyntheticTask::named("mixed").unwrap(), &w, 10, 15).unwrap();
    let mask = TrainMask::of(&["llm.*", "proj.*", "qf.*"]);
    let mut opt = OptimizerState::new(AdamWConfig::default(), 0);
    let mut em = 0.0;
    for step in 0..300 {
        let g = batch_gradients(&model, &set, &mask).unwrap();
        opt.step(&mut model.store, &g.grads, |_| 3e-3).unwrap();
        if step % 10 == 9 {
            em = evaluate(&model, &set, &LocalExperts).unwrap().exact_match;
            if em == 1.0 {
                break;
            }
        }
    }
    assert_eq!(em, 1.0);
}
