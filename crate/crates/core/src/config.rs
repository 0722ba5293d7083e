//! Experiment configuration.
//!
//! One TOML document drives every command. Top-level sections may be
//! omitted and then take their defaults; a section that is present must be
//! complete, and unknown keys are rejected everywhere. See
//! `configs/default.toml` for the full schema with every default spelled out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genrm::{GenrmConfig, JudgeEncoder, JudgingTokens};
use crate::pipeline::DataConfig;
use crate::policy::{hex_digest, Vocabulary};
use crate::preference::QualityOracle;
use crate::story::StoryConfig;

/// Settings of the multi-run experiment commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentsConfig {
    /// Group sizes compared by `sweep-rollout`.
    pub sweep_group_sizes: Vec<usize>,
    /// Seeds run by `ablate-shaping`.
    pub ablation_seeds: Vec<u64>,
    /// Steps averaged for the reward-curve variance.
    pub variance_window: usize,
}

impl Default for ExperimentsConfig {
    fn default() -> Self {
        Self {
            sweep_group_sizes: vec![2, 4, 8],
            ablation_seeds: (0..10).collect(),
            variance_window: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Root of every artifact; not part of the config hash.
    pub output_dir: PathBuf,
    pub oracle: QualityOracle,
    pub data: DataConfig,
    pub genrm: GenrmConfig,
    pub story: StoryConfig,
    pub experiments: ExperimentsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            oracle: QualityOracle::default(),
            data: DataConfig::default(),
            genrm: GenrmConfig::default(),
            story: StoryConfig::default(),
            experiments: ExperimentsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.oracle.validate()?;
        self.data.validate(&self.oracle)?;
        self.genrm.validate()?;
        self.story.validate()?;
        JudgingTokens::new(self.vocabulary()?)
            .map_err(|e| Error::Config(format!("data.shape.vocab_size: {e}")))?;
        if self.story.max_story_len < self.data.shape.max_story_len {
            return Err(Error::Config(
                "story.max_story_len must be at least data.shape.max_story_len".into(),
            ));
        }
        let e = &self.experiments;
        if e.sweep_group_sizes.len() < 2 || e.sweep_group_sizes.iter().any(|&g| g < 2) {
            return Err(Error::Config(
                "experiments.sweep_group_sizes needs at least two sizes, each at least 2".into(),
            ));
        }
        if e.ablation_seeds.len() < 2 {
            return Err(Error::Config("experiments.ablation_seeds needs at least two seeds".into()));
        }
        if e.variance_window < 2 || e.variance_window > self.genrm.grpo.steps {
            return Err(Error::Config(format!(
                "experiments.variance_window must lie in 2..={}",
                self.genrm.grpo.steps
            )));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.data.shape.vocab_size)
    }

    pub fn encoder(&self) -> Result<JudgeEncoder> {
        Ok(JudgeEncoder {
            tokens: JudgingTokens::new(self.vocabulary()?)?,
            oracle: self.oracle.clone(),
            thresholds: self.genrm.thresholds,
            max_query_len: self.genrm.max_query_len,
        })
    }

    /// Hex SHA-256 of the canonical JSON form, with `output_dir` cleared so
    /// the same experiment hashes identically wherever it is written.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        hex_digest(&serde_json::to_vec(&canonical).expect("config serializes"))
    }
}
