mod common;

use common::*;
use proptest::prelude::*;
use umoe_core::config::RunConfig;
use umoe_core::connectors::Modality;
use umoe_core::data::{generate_synthetic_batch, SyntheticTask, World};
use umoe_core::exec::Exec;
use umoe_core::model::UniMoe;
use umoe_core::moe::{moe_forward, route, ExpertFfn, LocalExperts, RoutingDecision};
use umoe_core::parallel::{
    data_parallel_step, dispatch_and_combine, shard_batch, shard_experts, unshard_experts, DispatchPlan, ExpertMap, ShardPolicy,
    ShardedExperts, WorkerGroup,
};
use umoe_core::params::TrainMask;
use umoe_core::train::batch_gradients;
use umoe_core::{Real, Tensor};

fn group(workers: usize, experts: usize) -> WorkerGroup {
    WorkerGroup::new(workers, experts, &ExpertMap::default(), ShardPolicy::RoundRobin).unwrap()
}

fn experts(m: usize, d: usize, f: usize, seed: u64) -> Vec<ExpertFfn<f64>> {
    let mut r = rng(seed);
    (0..m)
        .map(|_| {
            ExpertFfn::new(
                normal(&[d, f], 0.3, &mut r),
                normal(&[d, f], 0.3, &mut r),
                normal(&[f, d], 0.3, &mut r),
            )
        })
        .collect()
}

fn cast_experts(ex: &[ExpertFfn<f64>]) -> Vec<ExpertFfn<f32>> {
    ex.iter()
        .map(|e| ExpertFfn::new(e.w_gate.cast(), e.w_up.cast(), e.w_down.cast()))
        .collect()
}

fn within<S: Real>(a: &Tensor<S>, b: &Tensor<S>, tol: f64) -> bool {
    a.data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs() <= tol * y.to_f64_lossy().abs().max(1.0))
}

#[test]
fn expert_sharding_examples() {
    let ex = experts(4, 3, 5, 100);
    let one = shard_experts(&ex, &group(1, 4)).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].keys().copied().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    let two = shard_experts(&ex, &group(2, 4)).unwrap();
    assert_eq!(two[0].keys().copied().collect::<Vec<_>>(), vec![0, 2]);
    assert_eq!(two[1].keys().copied().collect::<Vec<_>>(), vec![1, 3]);
    assert!(shard_experts(&ex, &group(2, 3)).is_err());

    let mut dup = two.clone();
    dup[1].insert(0, ex[0].clone());
    assert!(unshard_experts(&dup).is_err());
    let mut missing = two;
    missing[0].remove(&2);
    assert!(unshard_experts(&missing).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sharding_round_trips(owners in prop::collection::vec(0usize..4, 1..9), seed in any::<u64>()) {
        let m = owners.len();
        let ex = experts(m, 3, 4, seed);
        let g = WorkerGroup::new(4, m, &ExpertMap::Explicit(owners.clone()), ShardPolicy::RoundRobin).unwrap();
        let shards = shard_experts(&ex, &g).unwrap();
        for (w, shard) in shards.iter().enumerate() {
            prop_assert!(shard.keys().all(|&e| owners[e] == w));
        }
        prop_assert_eq!(unshard_experts(&shards).unwrap(), ex);
    }

    #[test]
    fn dispatch_then_return_is_identity(seed in any::<u64>(), workers in 1usize..5, m in 1usize..7, k in 1usize..4, t in 1usize..20) {
        let k = k.min(m);
        let mut r = rng(seed);
        let d = route(&uniform(&[t, 4], &mut r), &normal(&[4, m], 2.0, &mut r), k).unwrap();
        let plan = DispatchPlan::build(&d, &group(workers, m)).unwrap();
        let mut rows: Vec<usize> = (0..workers).flat_map(|w| plan.return_rows(w)).collect();
        rows.sort_unstable();
        prop_assert_eq!(rows, (0..t * k).collect::<Vec<_>>());
        prop_assert_eq!(plan.loads().iter().sum::<usize>(), t * k);
        for w in 0..workers {
            for msg in &plan.queues[w] {
                prop_assert_eq!(group(workers, m).owner[msg.expert], w);
                prop_assert_eq!(d.selected_for(msg.token)[msg.slot], msg.expert);
            }
        }
    }
}

#[test]
fn corrupted_plan_is_rejected() {
    let mut r = rng(101);
    let d = route(&uniform(&[5, 4], &mut r), &normal(&[4, 4], 1.0, &mut r), 2).unwrap();
    let mut plan = DispatchPlan::build(&d, &group(2, 4)).unwrap();
    plan.check().unwrap();
    let moved = plan.queues[0].pop().unwrap();
    assert!(plan.check().is_err());
    plan.queues[1].push(moved);
    plan.check().unwrap();
    plan.queues[1].push(moved);
    assert!(plan.check().is_err());
}

#[test]
fn one_worker_is_byte_identical() {
    let ex = experts(4, 6, 10, 102);
    let mut r = rng(103);
    let x = uniform(&[9, 6], &mut r);
    let d = route(&x, &normal(&[6, 4], 1.0, &mut r), 2).unwrap();
    let want = moe_forward(&x, &ex, &d).unwrap();
    for exec in [Exec::Sequential, Exec::Parallel] {
        let (got, loads) = dispatch_and_combine(&x, &ex, &d, &group(1, 4), exec).unwrap();
        assert_eq!(got, want);
        assert_eq!(loads, vec![18]);
    }
}

#[test]
fn multi_worker_matches_single_worker() {
    let ex = experts(4, 8, 12, 104);
    let ex32 = cast_experts(&ex);
    let mut r = rng(105);
    let x = uniform(&[16, 8], &mut r);
    let router = normal(&[8, 4], 1.0, &mut r);
    let d = route(&x, &router, 2).unwrap();
    let d32 = route(&x.cast::<f32>(), &router.cast::<f32>(), 2).unwrap();
    let want = moe_forward(&x, &ex, &d).unwrap();
    let want32 = moe_forward(&x.cast::<f32>(), &ex32, &d32).unwrap();
    for workers in [2, 4] {
        let g = group(workers, 4);
        let (got, loads) = dispatch_and_combine(&x, &ex, &d, &g, Exec::Parallel).unwrap();
        assert!(within(&got, &want, 1e-12));
        assert_eq!(loads.iter().sum::<usize>(), 32);
        let (got32, _) = dispatch_and_combine(&x.cast::<f32>(), &ex32, &d32, &g, Exec::Parallel).unwrap();
        assert!(within(&got32, &want32, 1e-6));
        let (seq, _) = dispatch_and_combine(&x, &ex, &d, &g, Exec::Sequential).unwrap();
        assert_eq!(seq, got);
    }
}

#[test]
fn idle_worker_computes_nothing() {
    let ex = experts(4, 5, 7, 106);
    let x = uniform(&[6, 5], &mut rng(107));
    // Every token picks experts 0 and 2, both owned by worker 0.
    let mut probs = Tensor::zeros(&[6, 4]);
    for t in 0..6 {
        probs.data_mut()[t * 4..t * 4 + 4].copy_from_slice(&[0.5, 0.1, 0.3, 0.1]);
    }
    let d = RoutingDecision {
        probs,
        selected: [0, 2].repeat(6),
        gates: Tensor::from_rows(&vec![vec![0.625, 0.375]; 6]).unwrap(),
        topk: 2,
    };
    let (got, loads) = dispatch_and_combine(&x, &ex, &d, &group(2, 4), Exec::Parallel).unwrap();
    assert_eq!(loads, vec![12, 0]);
    assert!(within(&got, &moe_forward(&x, &ex, &d).unwrap(), 1e-12));
}

fn toy() -> (RunConfig, UniMoe<f64>, UniMoe<f32>, Vec<umoe_core::data::Sample>) {
    let cfg = RunConfig::toy();
    let world = World::new(&cfg.data, &cfg.connectors);
    let m64 = UniMoe::<f64>::init_moe(&cfg.model, &cfg.connectors, &mut rng(108)).unwrap();
    let mut m32 = UniMoe::<f32>::init_moe(&cfg.model, &cfg.connectors, &mut rng(108)).unwrap();
    // Spread the routers so different tokens land on different workers.
    for l in m32.layout.moe_indices() {
        let name = format!("llm.layers.{l}.moe.router");
        *m32.store.get_mut(&name).unwrap() = Tensor::<f64>::randn(&[64, 4], 0.5, &mut rng(l as u64)).cast();
    }
    let batch = generate_synthetic_batch(&SyntheticTask::named("mixed").unwrap(), &world, 8, 109).unwrap();
    (cfg, m64, m32, batch)
}

#[test]
fn sharded_backend_gradients_match_local() {
    let (_, model, _, batch) = toy();
    let mask = TrainMask::all();
    for workers in [2, 4] {
        let backend = ShardedExperts::new(group(workers, 4), Exec::Parallel);
        for sample in &batch[..3] {
            let run = |backend: &dyn umoe_core::moe::ExpertBackend<f64>| {
                let mut s = model.session(&mask);
                let out = model.forward_sample(&mut s, sample, backend).unwrap();
                let loss = s.g.value(out.loss).item();
                let grads = s.g.backward(out.loss).unwrap();
                (loss, s.g.param_grads(&grads))
            };
            let (l0, g0) = run(&LocalExperts);
            let (l1, g1) = run(&backend);
            assert!((l0 - l1).abs() <= 1e-12);
            assert_eq!(g0.keys().collect::<Vec<_>>(), g1.keys().collect::<Vec<_>>());
            for (k, g) in &g0 {
                assert!(within(&g1[k], g, 1e-12), "{k}");
            }
        }
    }
}

#[test]
fn data_parallel_matches_single_worker() {
    let (_, _, model, batch) = toy();
    let mask = TrainMask::all();
    let single = batch_gradients(&model, &batch, &mask).unwrap();
    let one = data_parallel_step(&model, &batch, &group(1, 4), &mask, Exec::Parallel).unwrap();
    assert_eq!(one.grads, single.grads);
    for workers in [2, 4] {
        for policy in [ShardPolicy::RoundRobin, ShardPolicy::ByModality] {
            let g = WorkerGroup::new(workers, 4, &ExpertMap::default(), policy).unwrap();
            let dp = data_parallel_step(&model, &batch, &g, &mask, Exec::Parallel).unwrap();
            assert!((dp.loss_mean - single.loss_sum / 8.0).abs() <= 1e-6 * dp.loss_mean.abs().max(1.0));
            for (k, grad) in &single.grads {
                assert!(within(&dp.grads[k], grad, 1e-6), "{k} with {workers} workers");
            }
            let again = data_parallel_step(&model, &batch, &g, &mask, Exec::Parallel).unwrap();
            let seq = data_parallel_step(&model, &batch, &g, &mask, Exec::Sequential).unwrap();
            assert_eq!(again.grads, dp.grads);
            assert_eq!(seq.grads, dp.grads);
        }
    }
}

#[test]
fn by_modality_shards_are_pure() {
    let cfg = RunConfig::toy();
    let world = World::new(&cfg.data, &cfg.connectors);
    let task = SyntheticTask::new("image+audio", &[Modality::Image, Modality::Audio], false);
    let batch = generate_synthetic_batch(&task, &world, 10, 110).unwrap();
    let g = WorkerGroup::new(2, 4, &ExpertMap::default(), ShardPolicy::ByModality).unwrap();
    let shards = shard_batch(&batch, &g);
    assert!(shards[0].iter().all(|&i| batch[i].modality() == Modality::Image));
    assert!(shards[1].iter().all(|&i| batch[i].modality() == Modality::Audio));
    assert_eq!(shards[0].len() + shards[1].len(), 10);

    // One modality over two workers would leave a worker idle: round-robin.
    let audio = generate_synthetic_batch(&SyntheticTask::named("audio").unwrap(), &world, 5, 111).unwrap();
    assert_eq!(shard_batch(&audio, &g), vec![vec![0, 2, 4], vec![1, 3]]);
}

#[test]
fn shards_partition_the_batch() {
    let cfg = RunConfig::toy();
    let world = World::new(&cfg.data, &cfg.connectors);
    let batch = generate_synthetic_batch(&SyntheticTask::named("mixed").unwrap(), &world, 13, 112).unwrap();
    for workers in 1..6 {
        for policy in [ShardPolicy::RoundRobin, ShardPolicy::ByModality] {
            let g = WorkerGroup::new(workers, 4, &ExpertMap::default(), policy).unwrap();
            let mut all: Vec<usize> = shard_batch(&batch, &g).into_iter().flatten().collect();
            all.sort_unstable();
            assert_eq!(all, (0..13).collect::<Vec<_>>());
        }
    }
}
