use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::OptimizerKind;
use crate::alignment::CapacityPolicy;
use crate::decoding::DecodeOptions;
use crate::error::{Error, Result};
use crate::losses::Reduction;
use crate::model::{Architecture, ModelConfig};
use crate::synthdata::SynthTaskConfig;

/// Run-level settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub arch: Architecture,
    /// Seeds batch order; model and task seeds live in their own sections.
    pub seed: u64,
    /// Shift applied to training alignments, in encoder frames.
    pub delay_frames: usize,
    /// Handling of chunks that receive more labels than they can hold.
    pub capacity: CapacityPolicy,
    /// Dataset file; generated from `[task]` when absent.
    pub dataset: Option<PathBuf>,
    /// Utterances to generate when no dataset file is given.
    pub dataset_size: usize,
    /// Output directory for checkpoints, logs and reports.
    pub out: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            arch: Architecture::Chunkwise,
            seed: 1,
            delay_frames: 0,
            capacity: CapacityPolicy::Repair,
            dataset: None,
            dataset_size: 10000,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Adam's first-moment decay, or the momentum coefficient.
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub reduction: Reduction,
    /// Dev-set evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Dev utterances used per evaluation; 0 uses all.
    pub eval_utterances: usize,
    /// Stop once the dev token error rate reaches this value.
    pub target_dev_ter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20000,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            learning_rate: 3e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            clip_norm: 5.0,
            reduction: Reduction::Sum,
            eval_every: 2000,
            eval_utterances: 200,
            target_dev_ter: 0.0,
        }
    }
}

/// Complete configuration of one run, loaded from a sectioned TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelConfig,
    pub task: SynthTaskConfig,
    pub train: TrainConfig,
    pub decode: DecodeOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        let (m, t) = (&self.model, &self.task);
        if m.feature_dim != t.feature_dim {
            return Err(Error::Config(format!(
                "model feature_dim {} differs from task feature_dim {}",
                m.feature_dim, t.feature_dim
            )));
        }
        if m.frame_reduction != t.frame_reduction {
            return Err(Error::Config(format!(
                "model frame_reduction {} differs from task frame_reduction {}",
                m.frame_reduction, t.frame_reduction
            )));
        }
        if m.vocab_size < t.model_vocab_size() {
            return Err(Error::Config(format!(
                "model vocab_size {} cannot hold {} task tokens plus <sos>/<eos>",
                m.vocab_size, t.vocab_size
            )));
        }
        let tr = &self.train;
        if tr.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(tr.learning_rate > 0.0 && tr.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&tr.beta1) || !(0.0..1.0).contains(&tr.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.decode.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.run.arch == Architecture::Chunkwise
            && !(self.decode.tau > 0.0 && self.decode.tau < 1.0)
        {
            return Err(Error::Config(format!(
                "tau {} must lie in (0, 1)",
                self.decode.tau
            )));
        }
        Ok(())
    }

    /// Sets the chunk length for both the model and the generator's capacity check.
    pub fn set_chunk_len(&mut self, chunk_len: usize) {
        self.model.chunk_len = chunk_len;
        self.task.chunk_len = chunk_len;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg =
            RunConfig::from_toml("[run]\narch = \"transducer\"\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.run.arch, Architecture::Transducer);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn rejects_inconsistent_or_unknown() {
        assert!(RunConfig::from_toml("[model]\nfeature_dim = 3\n").is_err());
        assert!(RunConfig::from_toml("[run]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[decode]\ntau = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[model]\nvocab_size = 5\n").is_err());
    }
}
