//! Multimodal mixture-of-experts language model toolkit: autograd core,
//! modality connectors, sparse MoE transformer, staged training, a
//! simulated multi-worker runtime and routing analytics.

pub mod analytics;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod connectors;
pub mod data;
pub mod error;
pub mod exec;
pub mod lora;
pub mod model;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod runlog;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
