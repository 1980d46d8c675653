#![allow(dead_code)]

pub mod grads;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umoe_core::autograd::{Graph, Var};
use umoe_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, std, rng)
}

/// Plain nested-loop matrix product over row-major slices.
pub fn matmul_loops(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random linear functional `Σ w ⊙ x`, used to turn tensor outputs into a
/// scalar for gradient checks.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let w = uniform(&shape, &mut rng(seed));
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum_all(p)
}

/// Row-wise LayerNorm with eps 1e-5.
pub fn ln_rows(x: &[f64], d: usize, g: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            out.push((row[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j]);
        }
    }
    out
}

/// Multi-head attention by explicit loops; `w` is `[wq, wk, wv, wo]`.
pub fn mha(xq: &[f64], xkv: &[f64], w: &[Tensor<f64>], heads: usize, d: usize, causal: bool) -> Vec<f64> {
    let (tq, tk) = (xq.len() / d, xkv.len() / d);
    let q = matmul_loops(xq, w[0].data(), tq, d, d);
    let k = matmul_loops(xkv, w[1].data(), tk, d, d);
    let v = matmul_loops(xkv, w[2].data(), tk, d, d);
    let dh = d / heads;
    let mut o = vec![0.0; tq * d];
    for h in 0..heads {
        for i in 0..tq {
            let visible = if causal { i + 1 } else { tk };
            let scores: Vec<f64> = (0..visible)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax_vec(&scores);
            for c in 0..dh {
                o[i * d + h * dh + c] = (0..visible).map(|j| p[j] * v[j * d + h * dh + c]).sum();
            }
        }
    }
    matmul_loops(&o, w[3].data(), tq, d, d)
}

/// Gated FFN `(silu(x Wg) ⊙ x Wu) Wd` by loops.
pub fn ffn_rows(x: &[f64], d: usize, wg: &Tensor<f64>, wu: &Tensor<f64>, wd: &Tensor<f64>) -> Vec<f64> {
    let t = x.len() / d;
    let f = wg.cols();
    let a = matmul_loops(x, wg.data(), t, d, f);
    let b = matmul_loops(x, wu.data(), t, d, f);
    let h: Vec<f64> = a.iter().zip(&b).map(|(&p, &q)| silu(p) * q).collect();
    matmul_loops(&h, wd.data(), t, f, d)
}

/// Leading eigenvector of `XᵀX` for a row-major `rows × cols` matrix, from
/// a dense symmetric eigensolver.
pub fn pc1_oracle(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, f64) {
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, x);
    let eig = nalgebra::SymmetricEigen::new(m.transpose() * &m);
    let (best, &lambda) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    (eig.eigenvectors.column(best).iter().copied().collect(), lambda)
}

pub fn abs_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).abs()
}
