//! Experiment configuration: one JSON file with `model`, `train`, `data`,
//! and `augment` sections mirroring the typed configs. Unknown keys are
//! rejected at every level so a typo cannot silently fall back to a
//! default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PrionViTConfig;
use crate::pipeline::{AugmentConfig, SplitSpec};
use crate::speckle::{DEFAULT_IMAGE_SIZE, DEFAULT_MODE_COUNT};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the PNG images and `manifest.csv`.
    pub dir: PathBuf,
    pub t_min: f64,
    pub t_max: f64,
    pub step: f64,
    /// Side length of generated specklegrams, before model resizing.
    pub speckle_size: usize,
    pub mode_count: usize,
    /// Seed for the synthetic fiber (mode amplitudes, phases, kappas).
    pub fiber_seed: u64,
    /// Cache preprocessed tensors under `dir`/cache.
    pub cache: bool,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            t_min: 0.0,
            t_max: 120.0,
            step: 0.2,
            speckle_size: DEFAULT_IMAGE_SIZE,
            mode_count: DEFAULT_MODE_COUNT,
            fiber_seed: 7,
            cache: true,
            split: SplitSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || self.t_max < self.t_min {
            return Err(Error::InvalidGrid {
                t_min: self.t_min,
                t_max: self.t_max,
                step: self.step,
            });
        }
        if self.speckle_size < 2 {
            return Err(Error::Config(format!(
                "speckle_size must be at least 2, got {}",
                self.speckle_size
            )));
        }
        if self.mode_count == 0 {
            return Err(Error::Config("mode_count must be >= 1".into()));
        }
        self.split.validate()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.csv")
    }

    pub fn cache_dir(&self) -> Option<PathBuf> {
        self.cache.then(|| self.dir.join("cache"))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: PrionViTConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.augment.validate()
    }

    /// Resolve the run seed: an explicit CLI value wins, then the
    /// `PRION_VIT_SEED` environment variable, then the config file.
    pub fn apply_seed_override(&mut self, cli_seed: Option<u64>) -> Result<()> {
        if let Some(seed) = seed_override(cli_seed)? {
            self.train.seed = seed;
        }
        Ok(())
    }
}

/// The seed requested outside any config file: the CLI flag if given,
/// otherwise `PRION_VIT_SEED` from the environment, otherwise `None`.
pub fn seed_override(cli_seed: Option<u64>) -> Result<Option<u64>> {
    if cli_seed.is_some() {
        return Ok(cli_seed);
    }
    match std::env::var("PRION_VIT_SEED") {
        Ok(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("PRION_VIT_SEED is not a u64: {raw:?}"))),
        Err(_) => Ok(None),
    }
}
