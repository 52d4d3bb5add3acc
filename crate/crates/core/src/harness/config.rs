use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptationConfig;
use crate::dyna::Scheduled;
use crate::dynamics::ModelConfig;
use crate::envs::{EnvName, EnvSpec};
use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::sac::SacConfig;

/// What the policy is trained against between real steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// The learned ensemble.
    Learned,
    /// The simulator itself stands in for the model.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvName,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    pub total_real_steps: u64,
    pub pretrain_random_steps: u64,
    /// E: real steps between model trainings.
    pub train_every: u64,
    /// F: branched rollouts per training.
    pub rollout_batch: usize,
    /// k, fixed or scheduled over epochs.
    pub rollout_length: Scheduled,
    /// G3: policy updates per real step.
    pub policy_updates: usize,
    pub real_ratio: f64,
    pub env_buffer_capacity: usize,
    /// Model buffer holds this many trainings' worth of rollouts.
    pub model_retain_epochs: usize,
    pub validation_fraction: f64,
    pub log_interval: u64,
    pub eval_episodes: usize,
    /// Critic steps used by the logging-only W1 probe.
    pub w1_probe_steps: usize,
    pub record_wall_clock: bool,
    pub model_kind: ModelKind,
    pub execution: Execution,
    pub model: ModelConfig,
    pub sac: SacConfig,
    pub adaptation: AdaptationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvName::Pendulum,
            horizon: 200,
            seeds: vec![0],
            total_real_steps: 30_000,
            pretrain_random_steps: 1_000,
            train_every: 250,
            rollout_batch: 400,
            rollout_length: Scheduled::Constant(1),
            policy_updates: 20,
            real_ratio: 0.05,
            env_buffer_capacity: 1_000_000,
            model_retain_epochs: 5,
            validation_fraction: 0.1,
            log_interval: 1_000,
            eval_episodes: 5,
            w1_probe_steps: 20,
            record_wall_clock: false,
            model_kind: ModelKind::Learned,
            execution: Execution::default(),
            model: ModelConfig::default(),
            sac: SacConfig::default(),
            adaptation: AdaptationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn env_spec(&self) -> EnvSpec {
        EnvSpec::new(self.env, self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        self.env_spec().validate()?;
        let positive = [
            ("seeds", self.seeds.len() as u64),
            ("train_every", self.train_every),
            ("rollout_batch", self.rollout_batch as u64),
            ("env_buffer_capacity", self.env_buffer_capacity as u64),
            ("model_retain_epochs", self.model_retain_epochs as u64),
            ("log_interval", self.log_interval),
            ("eval_episodes", self.eval_episodes as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.real_ratio) {
            return Err(Error::config("real_ratio must lie in [0, 1]"));
        }
        if self.pretrain_random_steps < self.model.min_samples as u64 && self.model_kind == ModelKind::Learned {
            return Err(Error::config(format!(
                "pretrain_random_steps must be at least model.min_samples ({})",
                self.model.min_samples
            )));
        }
        self.rollout_length.validate()?;
        if self.rollout_length.max_value() == 0 {
            return Err(Error::config("rollout_length must be at least 1"));
        }
        self.model.validate()?;
        self.sac.validate()?;
        self.adaptation.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    /// Model-buffer capacity for a rollout length of `k`.
    pub fn model_buffer_capacity(&self, k: u32) -> usize {
        self.model_retain_epochs * self.rollout_batch * k.max(1) as usize
    }
}
