use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which transformer blocks carry an MoE FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeLayout {
    FirstHalf,
    SecondHalf,
    /// Odd-indexed (zero-based) layers.
    Interval,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub ffn: usize,
    #[serde(default = "default_ffn_factor")]
    pub ffn_factor: usize,
    pub heads: usize,
    pub vocab: usize,
    pub experts: usize,
    pub topk: usize,
    pub moe_layout: MoeLayout,
    #[serde(default)]
    pub aux_loss_coeff: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_ffn_factor() -> usize {
    3
}

fn default_max_len() -> usize {
    64
}

impl ModelConfig {
    /// 4 blocks, d=64, f=172, 4 heads, vocab 256, 4 experts, top-2, Interval.
    pub fn toy() -> Self {
        Self {
            layers: 4,
            width: 64,
            ffn: 172,
            ffn_factor: 3,
            heads: 4,
            vocab: 256,
            experts: 4,
            topk: 2,
            moe_layout: MoeLayout::Interval,
            aux_loss_coeff: 0.0,
            max_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.topk == 0 || self.topk > self.experts {
            return Err(Error::Config(format!(
                "topk must satisfy 1 <= topk <= experts (got topk={}, experts={})",
                self.topk, self.experts
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.layers < 2 {
            return Err(Error::Config("at least two layers are required".into()));
        }
        if self.ffn_factor != 3 {
            return Err(Error::Config("only the gated FFN (ffn_factor = 3) is implemented".into()));
        }
        if self.aux_loss_coeff < 0.0 {
            return Err(Error::Config("aux_loss_coeff must be >= 0".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> LayerLayout {
        build_layer_layout(self.layers, self.moe_layout)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub is_moe: Vec<bool>,
}

impl LayerLayout {
    pub fn moe_layers(&self) -> usize {
        self.is_moe.iter().filter(|&&b| b).count()
    }

    pub fn dense(layers: usize) -> Self {
        Self {
            is_moe: vec![false; layers],
        }
    }

    /// Indices of MoE layers in ascending order.
    pub fn moe_indices(&self) -> Vec<usize> {
        (0..self.is_moe.len()).filter(|&l| self.is_moe[l]).collect()
    }
}

pub fn build_layer_layout(layers: usize, layout: MoeLayout) -> LayerLayout {
    let half = layers.div_ceil(2);
    let is_moe = (0..layers)
        .map(|l| match layout {
            MoeLayout::FirstHalf => l < half,
            MoeLayout::SecondHalf => l >= layers - half,
            MoeLayout::Interval => l % 2 == 1,
            MoeLayout::All => true,
        })
        .collect();
    LayerLayout { is_moe }
}
