//! Run configuration file and the parameter-table file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::connectors::ConnectorConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::moe::{CountSpec, ModelConfig};
use crate::parallel::ParallelConfig;

/// Optimizer and adapter settings of one training stage. Fields a stage
/// does not use are ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    #[serde(default = "d_steps")]
    pub steps: u64,
    #[serde(default = "d_batch")]
    pub batch: usize,
    /// Base learning rate; the stage default applies when absent.
    #[serde(default)]
    pub lr: Option<f64>,
    /// Per-group overrides keyed by parameter glob, first match wins.
    #[serde(default)]
    pub group_lr: BTreeMap<String, f64>,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub lora_rank: Option<usize>,
    #[serde(default)]
    pub lora_alpha: Option<f64>,
    /// Stage 3: also adapt attention projections.
    #[serde(default = "d_true")]
    pub attn_lora: bool,
    /// Stage 2: also train the task modality's Q-Former.
    #[serde(default)]
    pub train_qformer: bool,
    /// Stage 3 expert sources: `base`, `random` or a stage-2 task name.
    #[serde(default)]
    pub experts: Option<Vec<String>>,
}

fn d_steps() -> u64 {
    100
}
fn d_batch() -> usize {
    8
}
fn d_true() -> bool {
    true
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: d_steps(),
            batch: d_batch(),
            lr: None,
            group_lr: BTreeMap::new(),
            weight_decay: 0.0,
            lora_rank: None,
            lora_alpha: None,
            attn_lora: true,
            train_qformer: false,
            experts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticsConfig {
    /// Evaluation samples per analysis run.
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_top")]
    pub top_pathways: usize,
    #[serde(default = "d_task")]
    pub task: String,
}

fn d_samples() -> usize {
    200
}
fn d_top() -> usize {
    10
}
fn d_task() -> String {
    "mixed".into()
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        Self {
            samples: d_samples(),
            top_pathways: d_top(),
            task: d_task(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub connectors: ConnectorConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub stage0: StageConfig,
    #[serde(default)]
    pub stage1: StageConfig,
    /// Keyed by stage-2 task name.
    #[serde(default = "d_stage2")]
    pub stage2: BTreeMap<String, StageConfig>,
    #[serde(default)]
    pub stage3: StageConfig,
    #[serde(default)]
    pub parallel: ParallelConfig,
    #[serde(default)]
    pub analytics: AnalyticsConfig,
}

fn d_stage2() -> BTreeMap<String, StageConfig> {
    ["image", "audio", "speech"]
        .into_iter()
        .map(|t| (t.to_string(), StageConfig::default()))
        .collect()
}

impl RunConfig {
    /// The toy model with default stage settings.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            connectors: ConnectorConfig::toy(),
            data: DataConfig::default(),
            stage0: StageConfig::default(),
            stage1: StageConfig::default(),
            stage2: d_stage2(),
            stage3: StageConfig::default(),
            parallel: ParallelConfig::default(),
            analytics: AnalyticsConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.connectors.validate()?;
        self.data.validate(self.model.vocab)?;
        if self.stage3.experts.as_ref().is_some_and(|e| e.len() != self.model.experts) {
            return Err(Error::Config(format!(
                "stage3.experts must list {} sources",
                self.model.experts
            )));
        }
        for (name, st) in self.stages() {
            if st.batch == 0 {
                return Err(Error::Config(format!("{name}: batch must be positive")));
            }
            if st.lr.is_some_and(|lr| lr.is_nan() || lr <= 0.0) {
                return Err(Error::Config(format!("{name}: lr must be positive")));
            }
        }
        Ok(())
    }

    fn stages(&self) -> Vec<(String, &StageConfig)> {
        let mut v = vec![("stage0".to_string(), &self.stage0), ("stage1".to_string(), &self.stage1)];
        v.extend(self.stage2.iter().map(|(k, s)| (format!("stage2.{k}"), s)));
        v.push(("stage3".to_string(), &self.stage3));
        v
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// A file of `[[row]]` tables for parameter accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountTable {
    pub row: Vec<CountSpec>,
}

impl CountTable {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse(
            r#"
[model]
layers = 4
width = 64
ffn = 172
heads = 4
vocab = 256
experts = 4
topk = 2
moe_layout = "interval"
"#,
        )
        .unwrap();
        assert_eq!(cfg.connectors.queries, 32);
        assert_eq!(cfg.stage2.len(), 3);
        assert_eq!(cfg.parallel.workers, 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("[model]\nlayers = 4\nwidth = \"wide\"\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = toml::to_string(&RunConfig::toy()).unwrap();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::toy();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.stage1.steps += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
