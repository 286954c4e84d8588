use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use unitprompt::datasets::SynthConfig;
use unitprompt::featio::FeatureConfig;
use unitprompt::inference::VotingConfig;
use unitprompt::prompts::{PromptLengths, PromptMode};
use unitprompt::trainer::{PretrainConfig, TrainConfig};
use unitprompt::ulm::{GradCheckConfig, UlmConfig};

/// Errors that map to exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerSection {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Collapse runs of identical units in every segment.
    pub dedup: bool,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self {
            k: 100,
            max_iters: 300,
            tol: 1e-6,
            dedup: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub lengths: PromptLengths,
    pub mode: PromptMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub manifests: Vec<PathBuf>,
    pub segment_units: usize,
    /// Codebook used to encode `.ulmf` manifest entries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codebook: Option<PathBuf>,
    /// Explicit class order per task id (`disease/language`).
    pub classes: BTreeMap<String, Vec<String>>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifests: Vec::new(),
            segment_units: 250,
            codebook: None,
            classes: BTreeMap::new(),
        }
    }
}

/// Everything a run needs; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; copied into every section's seed when resolved.
    pub seed: u64,
    pub precision: Precision,
    pub output_dir: PathBuf,
    pub features: FeatureConfig,
    pub quantizer: QuantizerSection,
    /// Backbone architecture; `vocab_size` is set from the data when 0.
    pub model: UlmConfig,
    pub prompt: PromptSection,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub voting: VotingConfig,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let mut model = UlmConfig::desk(synth.k);
        model.vocab_size = 0;
        Self {
            seed: 0,
            precision: Precision::F32,
            output_dir: PathBuf::from("out"),
            features: FeatureConfig::default(),
            quantizer: QuantizerSection::default(),
            model,
            prompt: PromptSection::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            voting: VotingConfig::default(),
            data: DataSection::default(),
            synth,
            gradcheck: GradCheckConfig::default(),
        }
    }
}

pub const SEED_ENV: &str = "UNITPROMPT_SEED";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Ok(Self::from_toml(&text)?)
    }

    /// File values, then `UNITPROMPT_SEED`, then `--seed`.
    pub fn resolve(mut self, env_seed: Option<&str>, flag_seed: Option<u64>) -> Result<Self, ConfigError> {
        if let Some(s) = env_seed {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| ConfigError(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        if let Some(s) = flag_seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.synth.seed = self.seed;
        self.gradcheck.seed = self.seed;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |r: unitprompt::Result<()>| r.map_err(|e| ConfigError(e.to_string()));
        wrap(self.features.validate())?;
        wrap(self.train.validate())?;
        wrap(self.voting.validate())?;
        wrap(self.synth.validate())?;
        if self.quantizer.k == 0 {
            return Err(ConfigError("quantizer.k must be >= 1".into()));
        }
        if self.data.segment_units == 0 {
            return Err(ConfigError("data.segment_units must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes `resolved_config.toml` into `dir`.
    pub fn echo(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }
}
