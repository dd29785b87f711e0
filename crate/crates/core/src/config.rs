//! One JSON document configures every command. Unknown keys are rejected and
//! every section is validated on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::experiment::TrainSettings;
use crate::inference::SamplingConfig;
use crate::synth::TaskSpec;
use crate::{Error, Result};

/// Overrides `seed` and every seed derived from it.
pub const SEED_ENV: &str = "SIMULSTREAM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub min_lag_s: f64,
    pub window: usize,
    pub threshold: f64,
    /// EM iterations for the word-table scorer.
    pub em_iterations: usize,
    pub epsilon: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { min_lag_s: 2.0, window: 5, threshold: 0.25, em_iterations: 10, epsilon: 1e-6 }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lag_s >= 0.0) {
            return Err(Error::config("pipeline.min_lag_s", "must be ≥ 0"));
        }
        if self.window == 0 {
            return Err(Error::config("pipeline.window", "must be at least 1"));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::config("pipeline.threshold", "must be ≥ 0"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("pipeline.epsilon", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    /// Example seed offset of the held-out split.
    pub test_seed_offset: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_count: 10_000, test_count: 100, test_seed_offset: 1_000_003 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub steps: usize,
    /// Sample utterances whose speech latents form the training batch.
    pub utterances: usize,
    pub decay: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { steps: 200, utterances: 64, decay: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("run") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub codec: CodecTrainConfig,
    pub task: TaskSpec,
    pub train: TrainSettings,
    pub sampling: SamplingConfig,
    pub pipeline: PipelineConfig,
    pub data: DataConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 1,
            codec: CodecTrainConfig::default(),
            task: TaskSpec::default(),
            train: TrainSettings::default(),
            sampling: SamplingConfig::default(),
            pipeline: PipelineConfig::default(),
            data: DataConfig::default(),
            paths: Paths::default(),
        };
        c.apply_seed(c.seed);
        c
    }
}

impl RunConfig {
    /// Parse, apply the seed override from the environment, validate.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config(json_field(&e), e.to_string()))?;
        let seed = c.seed;
        c.apply_seed(seed);
        c.apply_env()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Defaults with the environment override applied.
    pub fn default_with_env() -> Result<Self> {
        let mut c = Self::default();
        c.apply_env()?;
        c.validate()?;
        Ok(c)
    }

    fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse::<u64>().map_err(|_| Error::config(SEED_ENV, format!("not an integer: {v:?}")))?;
            self.apply_seed(seed);
        }
        Ok(())
    }

    /// Set the master seed and derive the per-section seeds from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.task.seed = seed;
        self.task.example_seed = seed.wrapping_mul(7919).wrapping_add(100);
        self.train.seed = seed;
        self.sampling.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.codec.steps == 0 || self.codec.utterances == 0 {
            return Err(Error::config("codec.steps", "steps and utterances must be positive"));
        }
        if !(0.0..1.0).contains(&self.codec.decay) {
            return Err(Error::config("codec.decay", "must lie in [0, 1)"));
        }
        self.task.validate()?;
        self.train.validate()?;
        self.train.model.validate().map_err(|e| prefix("train.model", e))?;
        self.sampling.validate().map_err(|e| prefix("sampling", e))?;
        self.pipeline.validate()?;
        if self.data.train_count == 0 || self.data.test_count == 0 {
            return Err(Error::config("data", "counts must be positive"));
        }
        Ok(())
    }

    /// Task spec of the held-out split.
    pub fn test_task(&self) -> TaskSpec {
        TaskSpec { example_seed: self.task.example_seed.wrapping_add(self.data.test_seed_offset), ..self.task.clone() }
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } if !field.starts_with(section) => {
            Error::Config { field: format!("{section}.{field}"), message }
        }
        other => other,
    }
}

fn json_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`').nth(1).map_or_else(|| format!("line {}", e.line()), String::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.pipeline.min_lag_s, 2.0);
        assert_eq!(c.pipeline.window, 5);
        assert_eq!(c.pipeline.threshold, 0.25);
        assert_eq!(c.sampling.cfg_gamma, Some(3.0));
    }

    #[test]
    fn unknown_key_rejected_with_field() {
        let e = serde_json::from_str::<RunConfig>(r#"{"pipeline": {"min_lagg": 1.0}}"#).unwrap_err();
        assert!(e.to_string().contains("min_lagg"));
        let err = RunConfig::from_json(r#"{"pipeline": {"min_lagg": 1.0}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "min_lagg"), "{err}");
    }

    #[test]
    fn invalid_values_name_their_field() {
        let err = RunConfig::from_json(r#"{"pipeline": {"window": 0}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "pipeline.window"));
        let err = RunConfig::from_json(r#"{"train": {"batch_size": 0}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "train.batch_size"));
    }

    #[test]
    fn seed_propagates() {
        let c = RunConfig::from_json(r#"{"seed": 9}"#).unwrap();
        if std::env::var(SEED_ENV).is_err() {
            assert_eq!(c.task.seed, 9);
            assert_eq!(c.train.seed, 9);
            assert_eq!(c.sampling.seed, 9);
        }
        assert_ne!(c.test_task().example_seed, c.task.example_seed);
    }
}
