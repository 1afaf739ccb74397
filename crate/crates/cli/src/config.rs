//! Run configuration file. Every field is optional; command-line flags
//! override the file, and the file overrides built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nnwm::data::SynthSpec;
use nnwm::experiment::Situation;
use nnwm::nn::{CnnConfig, TrainConfig};
use nnwm::watermark::KeyFamily;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub data: DataSection,
    pub arch: Option<CnnConfig>,
    pub embed: EmbedSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Synthetic task parameters (used when no dataset directory is given).
    pub synth: SynthSpec,
    /// Directory holding `train.nnwd` and `test.nnwd` from the `dataset` command.
    pub dir: Option<PathBuf>,
    /// Directory holding the CIFAR-10 binary batches.
    pub cifar: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub situation: Option<Situation>,
    pub family: Option<KeyFamily>,
    pub bits: Option<usize>,
    pub lambda: Option<f64>,
    pub layer: Option<String>,
    pub key_seed: Option<u64>,
    /// Payload file; the all-ones payload is used when absent.
    pub payload: Option<PathBuf>,
    /// Trained model for the fine-tune and distill situations.
    pub source: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        if self.data.dir.is_some() && self.data.cifar.is_some() {
            bail!("config sets both data.dir and data.cifar");
        }
        Ok(())
    }
}
