//! Run configuration and the train / evaluate / sweep / projection drivers.

mod checkpoint;
mod evaluate;
mod project;
mod sweep;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{Ablation, LossConfig};
use crate::optim::AdamConfig;
use crate::text::Setting;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use evaluate::{evaluate, evaluate_system, predict_answers, AnswerSystem, GoldType, TrainedSystem};
pub use project::{alignment_gap, project_embeddings, read_projection, write_projection, EventRoleTag, ProjectionRow};
pub use sweep::{fewshot_sweep, parse_sweep_table, sweep_table, SweepRow};
pub use train::{corpus_vocab, train, write_artifacts, StepRecord, TrainOutcome, TransformReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: AdamConfig,
    /// Instances per micro-batch; the setting's default when absent.
    pub batch_size: Option<usize>,
    /// Micro-batches per optimizer step; the setting's default when absent.
    pub accumulation: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub min_count: usize,
    pub max_answer_len: usize,
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: AdamConfig::default(),
            batch_size: None,
            accumulation: None,
            epochs: 10,
            seed: 5,
            ablation: Ablation::default(),
            min_count: 1,
            max_answer_len: 32,
            train_path: None,
            eval_path: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&raw)?;
        Ok(cfg)
    }

    pub fn setting(&self) -> Setting {
        self.model.setting
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.setting() {
            Setting::Generative => 2,
            Setting::Extractive => 8,
        })
    }

    pub fn accumulation(&self) -> usize {
        self.accumulation.unwrap_or(match self.setting() {
            Setting::Generative => 3,
            Setting::Extractive => 2,
        })
    }

    /// Checks everything that does not depend on the data; the vocabulary
    /// size is filled in by training.
    pub fn validate(&self) -> Result<()> {
        let mut probe = self.model.clone();
        probe.vocab_size = probe.vocab_size.max(crate::text::Special::ALL.len() + 1);
        probe.validate()?;
        let as_config = |e: Error| match e {
            Error::Parameter(m) => Error::Config(m),
            other => other,
        };
        self.loss.validate().map_err(as_config)?;
        self.optim.validate().map_err(as_config)?;
        if self.batch_size() == 0 || self.accumulation() == 0 {
            return Err(Error::Config("batch size and accumulation steps must be positive".into()));
        }
        if self.max_answer_len == 0 {
            return Err(Error::Config("max_answer_len must be positive".into()));
        }
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setting_dependent_batching() {
        let mut c = RunConfig::default();
        assert_eq!((c.batch_size(), c.accumulation()), (2, 3));
        c.model.setting = Setting::Extractive;
        assert_eq!((c.batch_size(), c.accumulation()), (8, 2));
        c.batch_size = Some(4);
        assert_eq!(c.batch_size(), 4);
    }

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.loss.tau, 1.0);
        assert_eq!((c.loss.lambda_tc, c.loss.lambda_cl), (0.1, 0.1));
        assert_eq!((c.optim.beta1, c.optim.beta2, c.optim.eps), (0.9, 0.999, 1e-6));
        assert_eq!(c.optim.warmup_frac, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"epochs": 3, "ablation": {"no_cl": true}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert!(c.ablation.no_cl && !c.ablation.no_tc);
        assert_eq!(c.model.d_model, ModelConfig::default().d_model);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = RunConfig::default();
        c.loss.tau = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig {
            batch_size: Some(0),
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
