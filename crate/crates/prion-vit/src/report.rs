//! Config hashing and the two-variant ablation runner.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::pipeline::{Sample, Split};
use crate::train::{evaluate, train};

/// First 16 hex characters of the SHA-256 of the canonical JSON encoding.
/// Equal hashes imply byte-identical configs.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut hex = String::with_capacity(16);
    for byte in &digest[..8] {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// MAE reference points from the original full-scale experiment, recorded
/// in reports for context; desk-scale synthetic runs are not expected to
/// reach them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullScaleReference {
    pub prion_vit_mae_c: f64,
    pub plain_vit_mae_c: f64,
}

pub const FULL_SCALE_REFERENCE: FullScaleReference = FullScaleReference {
    prion_vit_mae_c: 0.52,
    plain_vit_mae_c: 1.15,
};

/// Per-metric difference, prion minus plain; negative MAE/RMSE deltas mean
/// the memory helped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantDelta {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub max_error: f64,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub seed: u64,
    pub prion_vit: MetricsReport,
    pub plain_vit: MetricsReport,
    pub delta: VariantDelta,
    pub full_scale_reference: FullScaleReference,
}

impl AblationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Other(format!("serialize ablation report: {e}")))?;
        std::fs::write(path, json)
            .map_err(|e| Error::io(format!("write {}", path.display()), e))
    }
}

/// Train the memory-enabled and memory-disabled variants under identical
/// seeds, data, and schedule, then evaluate both on the shared test split.
pub fn run_ablation(
    config: &ExperimentConfig,
    seed: u64,
    samples: &[Sample],
    split: &Split,
) -> Result<AblationReport> {
    if split.test.is_empty() {
        return Err(Error::EmptyDataset("test split is empty".into()));
    }
    let hash = config_hash(config);
    let mut train_cfg = config.train.clone();
    train_cfg.seed = seed;

    let run_variant = |memory_enabled: bool, label: &str| -> Result<MetricsReport> {
        let mut model_cfg = config.model.clone();
        model_cfg.memory_enabled = memory_enabled;
        let outcome = train(
            &model_cfg,
            &train_cfg,
            &config.augment,
            samples,
            split,
            None,
            &hash,
        )?;
        let mut report = evaluate(
            &model_cfg,
            &outcome.params,
            &outcome.memory,
            samples,
            &split.test,
            train_cfg.batch_size,
            &outcome.scaler,
            "test",
            &hash,
            seed,
        )?;
        report.split = format!("test/{label}");
        Ok(report)
    };

    let prion_vit = run_variant(true, "prion-vit")?;
    let plain_vit = run_variant(false, "plain-vit")?;

    let delta = VariantDelta {
        mse: prion_vit.mse - plain_vit.mse,
        mae: prion_vit.mae - plain_vit.mae,
        rmse: prion_vit.rmse - plain_vit.rmse,
        max_error: prion_vit.max_error - plain_vit.max_error,
        r2: match (prion_vit.r2, plain_vit.r2) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        },
    };

    Ok(AblationReport {
        config_hash: hash,
        seed,
        prion_vit,
        plain_vit,
        delta,
        full_scale_reference: FULL_SCALE_REFERENCE,
    })
}
