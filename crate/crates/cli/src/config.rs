//! Strict JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stiv::conditioning::TaskKind;
use stiv::flow::{GuidanceConfig, SamplerConfig};
use stiv::model::StivConfig;
use stiv::synth::CorpusConfig;
use stiv::train::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub enabled: bool,
    pub modes: Vec<TaskKind>,
    /// Cap on held-out clips scored; all when absent.
    pub max_clips: Option<usize>,
    /// Score the EMA weights rather than the raw ones.
    pub use_ema: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            modes: vec![TaskKind::Ti2v, TaskKind::T2v],
            max_clips: None,
            use_ema: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: StivConfig,
    pub train: TrainConfig,
    /// Seeds model initialization; `train.seed` seeds batches, times and noise.
    pub seed: u64,
    pub steps: u64,
    /// Masking is switched off after this step (masked pretraining, then unmasked
    /// fine-tuning on all tokens).
    pub unmask_after: Option<u64>,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub data: CorpusConfig,
    /// Train on only the first N training clips.
    pub overfit_clips: Option<usize>,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: StivConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            steps: 2000,
            unmask_after: None,
            checkpoint_every: 0,
            data: CorpusConfig::default(),
            overfit_clips: None,
            sampler: SamplerConfig::default(),
            guidance: GuidanceConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()
            .map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> stiv::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let latent = (self.data.frames, self.data.height / 2, self.data.width / 2);
        let model = (self.model.frames, self.model.height, self.model.width);
        if latent != model {
            return Err(stiv::StivError::Invalid(format!(
                "data latent (frames, height, width) {latent:?} does not match model {model:?}"
            )));
        }
        Ok(())
    }
}

/// Parses a strict `StivConfig` JSON file.
pub fn load_model_config(path: &Path) -> Result<StivConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let cfg: StivConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}
