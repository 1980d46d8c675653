//! Finite-difference gradient cases shared by the gradient tests and the
//! acceptance target.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use umoe_core::autograd::{finite_diff_check, GradCheckReport, Graph, Var};
use umoe_core::config::{RunConfig, StageConfig};
use umoe_core::data::{generate_synthetic_batch, Sample, SyntheticTask, World};
use umoe_core::exec::Exec;
use umoe_core::lora::lora_delta;
use umoe_core::model::UniMoe;
use umoe_core::moe::{aux_balance_loss_graph, route, route_graph, ExpertBackend, LocalExperts, ModelConfig, MoeLayout};
use umoe_core::nn::{attention, gated_ffn};
use umoe_core::parallel::{ExpertMap, ShardPolicy, ShardedExperts, WorkerGroup};
use umoe_core::params::TrainMask;
use umoe_core::train::attach_stage3_adapters;
use umoe_core::{Result, Tensor};

use super::{project, rng, uniform};

pub const EPS: f64 = 1e-6;
pub const PER_INPUT: usize = 40;

pub struct GradCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = uniform(shape, &mut rng(seed));
    for v in t.data_mut() {
        *v = 1.0 + 0.5 * *v;
    }
    t
}

fn case<F>(name: &'static str, inputs: Vec<Tensor<f64>>, build: F) -> GradCase
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = finite_diff_check(build, &inputs, EPS, PER_INPUT, 7).unwrap_or_else(|e| panic!("{name}: {e}"));
    GradCase { name, report }
}

/// One case per differentiable graph op and per composite layer.
pub fn op_cases() -> Vec<GradCase> {
    let u = |shape: &[usize], seed: u64| uniform(shape, &mut rng(seed));
    let mut out = vec![
        case("matmul", vec![u(&[3, 4], 1), u(&[4, 5], 2)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok(project(g, y, 100))
        }),
        case("transpose", vec![u(&[3, 4], 3)], |g, v| {
            let y = g.transpose(v[0])?;
            Ok(project(g, y, 101))
        }),
        case("add", vec![u(&[3, 4], 4), u(&[3, 4], 5)], |g, v| {
            let y = g.add(v[0], v[1])?;
            Ok(project(g, y, 102))
        }),
        case("sub", vec![u(&[3, 4], 6), u(&[3, 4], 7)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            Ok(project(g, y, 103))
        }),
        case("mul", vec![u(&[3, 4], 8), u(&[3, 4], 9)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            Ok(project(g, y, 104))
        }),
        case("add_row", vec![u(&[3, 4], 10), u(&[1, 4], 11)], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            Ok(project(g, y, 105))
        }),
        case("scale", vec![u(&[3, 4], 12)], |g, v| {
            let y = g.scale(v[0], -1.7);
            Ok(project(g, y, 106))
        }),
        case("silu", vec![u(&[3, 4], 13)], |g, v| {
            let y = g.silu(v[0]);
            Ok(project(g, y, 107))
        }),
        case("softmax", vec![u(&[3, 5], 14)], |g, v| {
            let y = g.softmax(v[0])?;
            Ok(project(g, y, 108))
        }),
        case("softmax_axis0", vec![u(&[4, 3], 15)], |g, v| {
            let y = g.softmax_axis(v[0], 0)?;
            Ok(project(g, y, 109))
        }),
        case("causal_mask", vec![u(&[4, 4], 16)], |g, v| {
            let m = g.causal_mask(v[0])?;
            let y = g.softmax(m)?;
            Ok(project(g, y, 110))
        }),
        case("layer_norm", vec![u(&[3, 6], 17), u(&[1, 6], 18), u(&[1, 6], 19)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            Ok(project(g, y, 111))
        }),
        case("slice_cols", vec![u(&[3, 6], 20)], |g, v| {
            let y = g.slice_cols(v[0], 2, 3)?;
            Ok(project(g, y, 112))
        }),
        case("concat_cols", vec![u(&[3, 2], 21), u(&[3, 4], 22)], |g, v| {
            let y = g.concat_cols(&[v[0], v[1], v[0]])?;
            Ok(project(g, y, 113))
        }),
        case("slice_rows", vec![u(&[5, 3], 23)], |g, v| {
            let y = g.slice_rows(v[0], 1, 3)?;
            Ok(project(g, y, 114))
        }),
        case("concat_rows", vec![u(&[2, 3], 24), u(&[4, 3], 25)], |g, v| {
            let y = g.concat_rows(&[v[1], v[0]])?;
            Ok(project(g, y, 115))
        }),
        case("gather_rows", vec![u(&[4, 3], 26)], |g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2, 1, 2])?;
            Ok(project(g, y, 116))
        }),
        case("scatter_rows", vec![u(&[2, 3], 27), u(&[2, 3], 28)], |g, v| {
            let y = g.scatter_rows(5, 3, vec![(v[0], vec![4, 1]), (v[1], vec![1, 3])])?;
            Ok(project(g, y, 117))
        }),
        case("gather_cols", vec![u(&[3, 5], 29)], |g, v| {
            let y = g.gather_cols(v[0], &[4, 0, 2, 3, 1, 1])?;
            Ok(project(g, y, 118))
        }),
        case("normalize_rows", vec![positive(&[3, 4], 30)], |g, v| {
            let y = g.normalize_rows(v[0])?;
            Ok(project(g, y, 119))
        }),
        case("mul_col", vec![u(&[4, 3], 31), u(&[4, 1], 32)], |g, v| {
            let y = g.mul_col(v[0], v[1])?;
            Ok(project(g, y, 120))
        }),
        case("sum_all", vec![u(&[3, 4], 33)], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum_all(y))
        }),
        case("mean_rows", vec![u(&[5, 3], 34)], |g, v| {
            let y = g.mean_rows(v[0]);
            Ok(project(g, y, 121))
        }),
        case("cross_entropy", vec![u(&[4, 6], 35)], |g, v| {
            g.cross_entropy(v[0], &[Some(1), None, Some(5), Some(1)])
        }),
        case(
            "attention",
            vec![u(&[5, 8], 36), u(&[8, 8], 37), u(&[8, 8], 38), u(&[8, 8], 39), u(&[8, 8], 40)],
            |g, v| {
                let y = attention(g, v[0], v[0], v[1], v[2], v[3], v[4], 2, true)?;
                Ok(project(g, y, 122))
            },
        ),
        case(
            "cross_attention",
            vec![
                u(&[3, 8], 41),
                u(&[6, 8], 42),
                u(&[8, 8], 43),
                u(&[8, 8], 44),
                u(&[8, 8], 45),
                u(&[8, 8], 46),
            ],
            |g, v| {
                let y = attention(g, v[0], v[1], v[2], v[3], v[4], v[5], 4, false)?;
                Ok(project(g, y, 123))
            },
        ),
        case(
            "gated_ffn",
            vec![u(&[4, 6], 47), u(&[6, 9], 48), u(&[6, 9], 49), u(&[9, 6], 50)],
            |g, v| {
                let y = gated_ffn(g, v[0], v[1], v[2], v[3])?;
                Ok(project(g, y, 124))
            },
        ),
        case("lora_delta", vec![u(&[4, 6], 51), u(&[2, 6], 52), u(&[5, 2], 53)], |g, v| {
            let y = lora_delta(g, v[0], v[1], v[2], 8.0)?;
            Ok(project(g, y, 125))
        }),
        case("route_graph", vec![u(&[6, 5], 54), u(&[5, 4], 55)], |g, v| {
            let (rv, _) = route_graph(g, v[0], v[1], 2)?;
            let a = project(g, rv.gates, 126);
            let b = project(g, rv.probs, 127);
            g.add(a, b)
        }),
    ];

    // The selection is held fixed; only the mean probabilities carry gradient.
    let (h, router) = (u(&[12, 5], 56), u(&[5, 4], 57));
    let decision = route(&h, &router, 2).unwrap();
    out.push(case("aux_balance_loss", vec![h, router], move |g, v| {
        let logits = g.matmul(v[0], v[1])?;
        let probs = g.softmax(logits)?;
        aux_balance_loss_graph(g, probs, &decision, 0.01)
    }));
    out
}

/// Two-block model in which both blocks are MoE, with connectors, fresh
/// stage-3 adapters (non-zero `B`) and the aux loss switched on.
pub fn grad_model() -> (UniMoe<f64>, Vec<Sample>) {
    let cfg = ModelConfig {
        layers: 2,
        width: 16,
        ffn: 24,
        ffn_factor: 3,
        heads: 2,
        vocab: 256,
        experts: 4,
        topk: 2,
        moe_layout: MoeLayout::All,
        aux_loss_coeff: 0.01,
        max_len: 64,
    };
    let run = RunConfig::toy();
    let mut model = UniMoe::<f64>::init_moe(&cfg, &run.connectors, &mut rng(60)).unwrap();
    for l in model.layout.moe_indices() {
        *model.store.get_mut(&format!("llm.layers.{l}.moe.router")).unwrap() =
            Tensor::randn(&[16, 4], 0.5, &mut rng(61 + l as u64));
    }
    attach_stage3_adapters(&mut model, &StageConfig::default(), 62).unwrap();
    let b_names: Vec<String> = model.store.names().filter(|n| n.ends_with(".lora_B")).cloned().collect();
    for (i, n) in b_names.iter().enumerate() {
        let shape = model.store.get(n).unwrap().shape().to_vec();
        *model.store.get_mut(n).unwrap() = Tensor::randn(&shape, 0.05, &mut rng(200 + i as u64));
    }
    let world = World::new(&run.data, &run.connectors);
    let samples = generate_synthetic_batch(&SyntheticTask::named("mixed").unwrap(), &world, 5, 63).unwrap();
    (model, samples)
}

fn mean_loss(model: &UniMoe<f64>, samples: &[Sample], backend: &dyn ExpertBackend<f64>) -> f64 {
    let mask = TrainMask::none();
    let total: f64 = samples
        .iter()
        .map(|s| {
            let mut sess = model.session(&mask);
            let out = model.forward_sample(&mut sess, s, backend).unwrap();
            sess.g.value(out.loss).item()
        })
        .sum();
    total / samples.len() as f64
}

fn mean_grads(model: &UniMoe<f64>, samples: &[Sample], backend: &dyn ExpertBackend<f64>) -> BTreeMap<String, Tensor<f64>> {
    let mask = TrainMask::all();
    let mut acc: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    for s in samples {
        let mut sess = model.session(&mask);
        let out = model.forward_sample(&mut sess, s, backend).unwrap();
        let grads = sess.g.backward(out.loss).unwrap();
        for (k, g) in sess.g.param_grads(&grads) {
            match acc.get_mut(&k) {
                Some(a) => a.add_assign(&g),
                None => {
                    acc.insert(k, g);
                }
            }
        }
    }
    let n = samples.len() as f64;
    for g in acc.values_mut() {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    acc
}

/// Central differences of the mean sample loss against the analytic
/// gradient, over `per_param` sampled coordinates of every trainable tensor.
/// `workers = 0` runs experts locally, otherwise through the sharded backend.
pub fn model_grad_check(model: &UniMoe<f64>, samples: &[Sample], workers: usize, per_param: usize) -> GradCheckReport {
    let backend: Box<dyn ExpertBackend<f64>> = if workers == 0 {
        Box::new(LocalExperts)
    } else {
        let group = WorkerGroup::new(workers, model.config.experts, &ExpertMap::default(), ShardPolicy::RoundRobin).unwrap();
        Box::new(ShardedExperts::new(group, Exec::Parallel))
    };
    let eps = 1e-5;
    let analytic = mean_grads(model, samples, backend.as_ref());
    let mut work = model.clone();
    let mut r = rng(64);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (k, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords = if n <= per_param {
            (0..n).collect()
        } else {
            sample(&mut r, n, per_param).into_vec()
        };
        for j in coords {
            let orig = work.store.get(name).unwrap().data()[j];
            work.store.get_mut(name).unwrap().data_mut()[j] = orig + eps;
            let plus = mean_loss(&work, samples, backend.as_ref());
            work.store.get_mut(name).unwrap().data_mut()[j] = orig - eps;
            let minus = mean_loss(&work, samples, backend.as_ref());
            work.store.get_mut(name).unwrap().data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            report.coords_checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((k, j));
            }
        }
    }
    report
}
