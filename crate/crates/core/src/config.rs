//! Run configuration. Every block has defaults and accepts partial JSON.

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of object slots produced by the vision encoder.
    pub objects: usize,
    /// Sub-vector width of object latents.
    pub sub_object: usize,
    /// Sub-vector width of force latents.
    pub sub_force: usize,
    /// Width between the gate and output projections of a block.
    pub attention_dim: usize,
    pub ffn_hidden: usize,
    /// Codomain width of the controller projections; also the score divisor.
    pub score_dim: usize,
    pub encoder_channels: usize,
    pub encoder_hidden: usize,
    pub action_hidden: usize,
    pub reward_hidden: usize,
    pub baseline_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            objects: 5,
            sub_object: 4,
            sub_force: 4,
            attention_dim: 16,
            ffn_hidden: 64,
            score_dim: 8,
            encoder_channels: 16,
            encoder_hidden: 64,
            action_hidden: 64,
            reward_hidden: 32,
            baseline_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.objects,
            self.sub_object,
            self.sub_force,
            self.attention_dim,
            self.ffn_hidden,
            self.score_dim,
            self.encoder_channels,
            self.encoder_hidden,
            self.action_hidden,
            self.reward_hidden,
            self.baseline_hidden,
        ];
        if widths.contains(&0) {
            return Err(Error::config("model widths must be positive"));
        }
        if self.sub_object != self.sub_force {
            return Err(Error::config(
                "object and force sub-vectors must share a width so blocks can gate across node kinds",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Transitions per minibatch in the contrastive stage.
    pub batch: usize,
    /// Episodes per minibatch in the controller and alternating stages.
    pub episode_batch: usize,
    pub beta: f64,
    pub mu: f64,
    pub gamma: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch: 64,
            episode_batch: 8,
            beta: 1.0,
            mu: 0.1,
            gamma: 0.9,
            stage1_epochs: 50,
            stage2_epochs: 20,
            stage3_rounds: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    pub seeds: usize,
    /// Seeds kept by top-k aggregation; the rest (lowest) are dropped.
    pub top_k: usize,
    /// Roll the controllers out by sampling instead of argmax.
    pub sampled: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizons: vec![1, 5, 10],
            seeds: 10,
            top_k: 8,
            sampled: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub horizon: usize,
    pub budget: usize,
    pub max_steps: usize,
    pub tasks: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            horizon: 5,
            budget: 128,
            max_steps: 10,
            tasks: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    /// Episodes generated by `gen-data`.
    pub episodes: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub plan: PlanConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            env: EnvConfig::default(),
            episodes: 100,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            plan: PlanConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.model.validate()?;
        if self.model.objects < self.env.objects {
            return Err(Error::config(format!(
                "{} object slots cannot represent {} objects",
                self.model.objects, self.env.objects
            )));
        }
        if self.train.batch == 0 || self.train.episode_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if self.eval.horizons.contains(&0) {
            return Err(Error::config("horizons must be at least 1"));
        }
        if self.eval.top_k > self.eval.seeds {
            return Err(Error::config("top-k cannot exceed the seed count"));
        }
        Ok(())
    }
}
