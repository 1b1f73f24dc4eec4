//! Optimization, pre-training and post-training loops, checkpoints.

mod adam;
mod checkpoint;
mod trainer;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, lr_multiplier, AdamState};
pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, Stage, MAGIC};
pub use trainer::{
    evaluate_masked_accuracy, masked_accuracy, posttrain_infonce, pretrain, run_training, sample_batch, StepMetrics, TrainState, Trainer,
};

use crate::error::{Error, Result};

/// How batch sentences are spread over languages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageSampling {
    /// Each example picks a language uniformly, then a sentence.
    #[default]
    Uniform,
    /// Each example picks uniformly among all sentences.
    Proportional,
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub language_sampling: LanguageSampling,
    /// Metrics are written every this many steps.
    pub log_every: u64,
    /// Checkpoints are written every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: "tiny".into(),
            learning_rate: 5e-3,
            warmup_steps: 50,
            total_steps: 500,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            weight_decay: 0.01,
            seed: 0,
            language_sampling: LanguageSampling::Uniform,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Optimizer defaults for a model preset.
    pub fn preset(name: &str) -> Result<Self> {
        let learning_rate = match name {
            "tiny" => 5e-3,
            "small" => 3e-4,
            "base" => 5e-4,
            "large" => 1e-4,
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        Ok(TrainConfig { preset: name.into(), learning_rate, ..TrainConfig::default() })
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.warmup_steps > self.total_steps {
            p.push(format!(
                "train.warmup_steps ({}) exceeds train.total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            p.push("train.batch_size must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                p.push(format!("train.{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            p.push(format!("train.epsilon must be positive, got {}", self.epsilon));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            p.push(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.log_every == 0 {
            p.push("train.log_every must be positive".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}
