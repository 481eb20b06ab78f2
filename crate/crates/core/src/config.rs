//! Training hyperparameters.
//!
//! Config files are flat `key = value` TOML; the `[ablation]` section holds
//! the switches. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Drop the classifier discrepancy term from Steps B and C.
    pub disable_dis: bool,
    /// Drop the class-mean alignment term from Step C.
    pub disable_m: bool,
    /// Drop the entropy term from Step C.
    pub disable_em: bool,
    /// Replace the prototypical classifier by a second neural classifier.
    pub same_classifier_variant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub sigma: f64,
    pub lr: f64,
    pub pretrain_lr: f64,
    pub pretrain_iters: usize,
    pub train_iters: usize,
    pub batch_size: usize,
    pub num_projections: usize,
    pub proto_max_steps: usize,
    pub temperature: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub dropout_retain: f64,
    /// Replace Steps B and C by extra source-only updates (baseline runs).
    pub source_only: bool,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.1,
            lambda2: 0.1,
            sigma: 0.03,
            lr: 0.001,
            pretrain_lr: 0.001,
            pretrain_iters: 2000,
            train_iters: 1000,
            batch_size: 64,
            num_projections: 128,
            proto_max_steps: 3,
            temperature: 1.0,
            seed: 0,
            eval_every: 50,
            hidden_dim: 1024,
            embed_dim: 512,
            dropout_retain: 0.5,
            source_only: false,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return fail(format!(
                "lambda1 and lambda2 must be >= 0 (got {}, {})",
                self.lambda1, self.lambda2
            ));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return fail(format!("sigma must lie in [0, 1], got {}", self.sigma));
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.dropout_retain > 0.0 && self.dropout_retain <= 1.0) {
            return fail(format!(
                "dropout_retain must lie in (0, 1], got {}",
                self.dropout_retain
            ));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("num_projections", self.num_projections),
            ("proto_max_steps", self.proto_max_steps),
            ("eval_every", self.eval_every),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        Ok(())
    }
}
