use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umoe_core::config::RunConfig;
use umoe_core::data::{generate_synthetic_batch, SyntheticTask, World};
use umoe_core::exec::Exec;
use umoe_core::model::UniMoe;
use umoe_core::moe::{route, ExpertFfn};
use umoe_core::parallel::{data_parallel_step, dispatch_and_combine, ExpertMap, ShardPolicy, WorkerGroup};
use umoe_core::params::TrainMask;
use umoe_core::Tensor;

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn expert_dispatch(c: &mut Criterion) {
    let (tokens, width, ffn, experts) = (512, 128, 344, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(&[tokens, width], 1.0, &mut rng);
    let router = Tensor::<f32>::randn(&[width, experts], 0.5, &mut rng);
    let ex: Vec<ExpertFfn<f32>> = (0..experts)
        .map(|_| {
            ExpertFfn::new(
                Tensor::randn(&[width, ffn], 0.05, &mut rng),
                Tensor::randn(&[width, ffn], 0.05, &mut rng),
                Tensor::randn(&[ffn, width], 0.05, &mut rng),
            )
        })
        .collect();
    let decision = route(&x, &router, 2).unwrap();
    let mut group = c.benchmark_group("expert_dispatch");
    for workers in [1, 2, 4] {
        let g = WorkerGroup::new(workers, experts, &ExpertMap::default(), ShardPolicy::RoundRobin).unwrap();
        for (name, exec) in EXECS {
            group.bench_with_input(BenchmarkId::new(name, workers), &g, |b, g| {
                b.iter(|| dispatch_and_combine(black_box(&x), &ex, &decision, g, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn data_parallel(c: &mut Criterion) {
    let cfg = RunConfig::toy();
    let world = World::new(&cfg.data, &cfg.connectors);
    let model = UniMoe::<f32>::init_moe(&cfg.model, &cfg.connectors, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let batch = generate_synthetic_batch(&SyntheticTask::named("mixed").unwrap(), &world, 16, 2).unwrap();
    let mask = TrainMask::all();
    let mut group = c.benchmark_group("data_parallel_step");
    group.sample_size(10);
    for workers in [1, 2, 4] {
        let g = WorkerGroup::new(workers, cfg.model.experts, &ExpertMap::default(), ShardPolicy::ByModality).unwrap();
        for (name, exec) in EXECS {
            group.bench_with_input(BenchmarkId::new(name, workers), &g, |b, g| {
                b.iter(|| data_parallel_step(&model, black_box(&batch), g, &mask, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, expert_dispatch, data_parallel);
criterion_main!(benches);
