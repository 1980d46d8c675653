//! Layer building blocks expressed on the autograd graph.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::Session;
use crate::tensor::Real;

pub const LN_EPS: f64 = 1e-5;

/// Per-head scaled dot-product attention over already-projected `q`, `k`,
/// `v`; heads are concatenated along columns. No output projection.
pub fn sdpa_heads<S: Real>(g: &mut Graph<S>, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
    let d = g.value(q).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    if g.value(k).cols() != d || g.value(v).cols() != d {
        return Err(Error::shape("attention", g.value(q).shape(), g.value(k).shape()));
    }
    let dh = d / heads;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, scale);
        if causal {
            scores = g.causal_mask(scores)?;
        }
        let attn = g.softmax(scores)?;
        outs.push(g.matmul(attn, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Multi-head attention with explicit projection weights:
/// `concat_h(softmax(q_h k_hᵀ / √d_h) v_h) · W_o`.
#[allow(clippy::too_many_arguments)]
pub fn attention<S: Real>(
    g: &mut Graph<S>,
    x_q: Var,
    x_kv: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let q = g.matmul(x_q, wq)?;
    let k = g.matmul(x_kv, wk)?;
    let v = g.matmul(x_kv, wv)?;
    let o = sdpa_heads(g, q, k, v, heads, causal)?;
    g.matmul(o, wo)
}

/// `W_down · (silu(x W_gate) ⊙ x W_up)`.
pub fn gated_ffn<S: Real>(g: &mut Graph<S>, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let a = g.matmul(x, w_gate)?;
    let a = g.silu(a);
    let b = g.matmul(x, w_up)?;
    let h = g.mul(a, b)?;
    g.matmul(h, w_down)
}

/// Attention whose four projections live under `prefix` (`wq`, `wk`, `wv`,
/// `wo`) and may carry adapters.
pub fn session_attention<S: Real>(
    s: &mut Session<'_, S>,
    x_q: Var,
    x_kv: Var,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let q = s.linear(x_q, &format!("{prefix}.wq"))?;
    let k = s.linear(x_kv, &format!("{prefix}.wk"))?;
    let v = s.linear(x_kv, &format!("{prefix}.wv"))?;
    let o = sdpa_heads(&mut s.g, q, k, v, heads, causal)?;
    s.linear(o, &format!("{prefix}.wo"))
}

/// Gated FFN whose matrices live under `prefix`.
pub fn session_ffn<S: Real>(s: &mut Session<'_, S>, x: Var, prefix: &str) -> Result<Var> {
    let a = s.linear(x, &format!("{prefix}.w_gate"))?;
    let a = s.g.silu(a);
    let b = s.linear(x, &format!("{prefix}.w_up"))?;
    let h = s.g.mul(a, b)?;
    s.linear(h, &format!("{prefix}.w_down"))
}

pub const FFN_MATRICES: [&str; 3] = ["w_gate", "w_up", "w_down"];
pub const ATTN_MATRICES: [&str; 4] = ["wq", "wk", "wv", "wo"];
