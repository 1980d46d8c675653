//! AdamW with a cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Cosine decay factor `0.5·(1 + cos(π·step/horizon))`, held at zero once
/// `step` passes the horizon.
pub fn cosine_factor(step: u64, horizon: u64) -> f64 {
    if horizon == 0 {
        return 1.0;
    }
    let t = step.min(horizon) as f64 / horizon as f64;
    0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    pub first: BTreeMap<String, Tensor<S>>,
    pub second: BTreeMap<String, Tensor<S>>,
    /// Number of completed updates.
    pub step: u64,
    pub horizon: u64,
    pub config: AdamWConfig,
}

impl<S: Real> OptimizerState<S> {
    pub fn new(config: AdamWConfig, horizon: u64) -> Self {
        Self {
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
            horizon,
            config,
        }
    }

    /// Schedule multiplier applied to the next update.
    pub fn lr_factor(&self) -> f64 {
        cosine_factor(self.step, self.horizon)
    }

    /// One decoupled-weight-decay Adam update. `base_lr` gives each
    /// parameter's base learning rate; parameters absent from `grads` are
    /// left untouched. Frozen parameters are rejected.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &BTreeMap<String, Tensor<S>>,
        base_lr: impl Fn(&str) -> f64,
    ) -> Result<()> {
        let factor = self.lr_factor();
        let t = (self.step + 1) as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            if store.is_frozen(name) {
                return Err(Error::Invalid(format!("optimizer asked to update frozen `{name}`")));
            }
            let lr = base_lr(name) * factor;
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
            let (lr_s, wd, eps) = (S::lit(lr), S::lit(c.weight_decay), S::lit(c.eps));
            let (bc1, bc2) = (S::lit(bc1), S::lit(bc2));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr_s * wd * *pv;
                *pv = *pv - lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_factor(0, 100), 1.0);
        assert!((cosine_factor(50, 100) - 0.5).abs() < 1e-15);
        assert!(cosine_factor(100, 100).abs() < 1e-15);
        assert!(cosine_factor(250, 100).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap(), false);
        let before = store.clone();
        let mut opt = OptimizerState::new(AdamWConfig::default(), 10);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[3]))]);
        for _ in 0..5 {
            opt.step(&mut store, &grads, |_| 1e-2).unwrap();
        }
        assert_eq!(store, before);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn scalar_update_matches_hand_script() {
        // Moments pre-seeded; expected value scripted independently below.
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(0.7), false);
        let mut opt = OptimizerState::new(cfg, 4);
        opt.step = 1;
        opt.first.insert("w".into(), Tensor::scalar(0.05));
        opt.second.insert("w".into(), Tensor::scalar(0.002));
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(0.3))]);
        opt.step(&mut store, &grads, |_| 0.01).unwrap();

        let lr = 0.01 * 0.5 * (1.0 + (PI * 0.25).cos());
        let m = 0.9 * 0.05 + 0.1 * 0.3;
        let v = 0.999 * 0.002 + 0.001 * 0.09;
        let mhat = m / (1.0 - 0.9f64.powi(2));
        let vhat = v / (1.0 - 0.999f64.powi(2));
        let mut p = 0.7;
        p -= lr * 0.1 * p;
        p -= lr * mhat / (vhat.sqrt() + 1e-8);
        assert!((store.get("w").unwrap().item() - p).abs() <= 1e-12);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn frozen_parameter_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(1.0), true);
        let mut opt = OptimizerState::new(AdamWConfig::default(), 1);
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        assert!(opt.step(&mut store, &grads, |_| 1.0).is_err());
    }
}
