use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use xlmp::encoder::EncoderConfig;
use xlmp::objectives::InfoNceConfig;
use xlmp::training::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of `<lang>.txt` files.
    pub corpus_dir: Option<PathBuf>,
    pub min_freq: usize,
    /// Longest encoded sentence including CLS; 0 fills the model's capacity.
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { corpus_dir: None, min_freq: 1, max_len: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Layer for single-layer retrieval; defaults to the last one.
    pub layer: Option<usize>,
    pub prompts: bool,
    pub include_prompt_positions: bool,
    /// Sentences per language in prompt exports.
    pub samples_per_language: usize,
    pub null_permutations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { layer: None, prompts: true, include_prompt_positions: false, samples_per_language: 200, null_permutations: 20 }
    }
}

/// Run description. Every field has a default; `preset` selects the model
/// and optimizer defaults that explicit fields then override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub infonce: InfoNceConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_preset("tiny").expect("tiny preset exists")
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn for_preset(name: &str) -> xlmp::Result<Self> {
        Ok(RunConfig {
            preset: name.to_string(),
            seed: 0,
            model: EncoderConfig::preset(name, 0)?,
            train: TrainConfig::preset(name)?,
            infonce: InfoNceConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        })
    }

    /// Parses a JSON document over the defaults of its preset.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let user: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(obj) = &user else {
            return Err(CliError::Config("config must be a JSON object".into()));
        };
        let seed = obj.get("seed").cloned().unwrap_or(Value::from(0));
        if obj.get("train").and_then(|t| t.get("seed")).is_some_and(|s| *s != seed) {
            return Err(CliError::Config("train.seed must be omitted or equal the top-level seed".into()));
        }
        let preset = obj.get("preset").and_then(Value::as_str).unwrap_or("tiny");
        let base = RunConfig::for_preset(preset).map_err(|e| CliError::Config(e.to_string()))?;
        let mut merged = serde_json::to_value(&base).expect("config serializes");
        merge(&mut merged, user);
        let mut cfg: RunConfig = serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.train.preset = cfg.preset.clone();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every constraint violation, so a run can be rejected before it starts.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.model.problems();
        p.extend(self.train.problems());
        if let Err(e) = self.infonce.validate() {
            p.push(e.to_string());
        }
        if self.data.min_freq == 0 {
            p.push("data.min_freq must be at least 1".into());
        }
        if self.data.max_len == 1 {
            p.push("data.max_len must be 0 or at least 2".into());
        }
        if let Some(l) = self.eval.layer {
            if l > self.model.num_layers {
                p.push(format!("eval.layer {l} exceeds model.num_layers {}", self.model.num_layers));
            }
        }
        if self.eval.include_prompt_positions && !self.eval.prompts {
            p.push("eval.include_prompt_positions requires eval.prompts".into());
        }
        p
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!("invalid configuration:\n  - {}", p.join("\n  - "))))
        }
    }

    /// Sentence length budget, CLS included.
    pub fn max_len(&self) -> usize {
        if self.data.max_len > 0 {
            self.data.max_len
        } else {
            let lp = if self.model.has_pool() { self.model.prompt_len } else { 0 };
            self.model.max_seq_len - lp
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
