//! Activated / total parameter accounting for MoE-upcycled dense models.

use serde::{Deserialize, Serialize};

use super::config::{build_layer_layout, MoeLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub activated: u64,
    pub total: u64,
}

/// Architecture fields needed for counting; mirrors one row of a model table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountSpec {
    pub name: String,
    /// Parameter count of the dense base model.
    pub base_total: u64,
    pub layers: usize,
    pub width: usize,
    pub ffn: usize,
    pub ffn_factor: usize,
    #[serde(default = "one")]
    pub experts: usize,
    #[serde(default = "one")]
    pub topk: usize,
    /// Explicit MoE layer count; derived from `moe_layout` when absent.
    #[serde(default)]
    pub moe_layers: Option<usize>,
    #[serde(default)]
    pub moe_layout: Option<MoeLayout>,
}

fn one() -> usize {
    1
}

impl CountSpec {
    pub fn moe_layers(&self) -> usize {
        if self.experts <= 1 {
            return 0;
        }
        match (self.moe_layers, self.moe_layout) {
            (Some(n), _) => n,
            (None, Some(layout)) => build_layer_layout(self.layers, layout).moe_layers(),
            (None, None) => 0,
        }
    }
}

/// Each MoE layer adds `M−1` extra FFN copies of `ffn_factor·d·f` weights to
/// the total and `topk−1` to the activated count, plus a `d × M` router.
pub fn count_parameters(spec: &CountSpec) -> ParamCount {
    let moe = spec.moe_layers() as u64;
    let per_expert = (spec.ffn_factor * spec.width * spec.ffn) as u64;
    let router = if spec.experts > 1 {
        moe * (spec.width * spec.experts) as u64
    } else {
        0
    };
    let (m, k) = (spec.experts as u64, spec.topk as u64);
    ParamCount {
        activated: spec.base_total + moe * (k - 1) * per_expert + router,
        total: spec.base_total + moe * (m - 1) * per_expert + router,
    }
}

/// Dense LLaMA-style decoder: tied-free embedding and head, four `d×d`
/// attention maps, a gated FFN and two RMS/LN gains per layer, final norm.
pub fn dense_decoder_params(vocab: usize, width: usize, layers: usize, ffn: usize, ffn_factor: usize) -> u64 {
    let (v, d, f) = (vocab as u64, width as u64, ffn as u64);
    let per_layer = 4 * d * d + ffn_factor as u64 * d * f + 2 * d;
    2 * v * d + layers as u64 * per_layer + d
}

/// Billions rounded to one decimal, e.g. `13.2B`.
pub fn format_billions(n: u64) -> String {
    format!("{:.1}B", n as f64 / 1e9)
}
