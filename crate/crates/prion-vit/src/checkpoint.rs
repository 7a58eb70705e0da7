//! Versioned training snapshots.
//!
//! A checkpoint is a single JSON document holding everything needed to
//! resume or evaluate a run: both configs, every parameter tensor, the
//! memory snapshot, optimizer moments, the epoch counter, RNG positions,
//! and the label scaler. Values are written with shortest-round-trip float
//! formatting, so save followed by load reproduces every tensor bit for
//! bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MemoryState, ModelParams, PrionViTConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{AdamState, LabelScaler, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_tensor(name: &str, t: &Tensor) -> Self {
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

/// One RNG position: enough to reconstruct the stream exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngSnapshot {
    pub fn capture(rng: &Rng) -> Self {
        let (stream, word_pos) = rng.state();
        Self {
            seed: rng.seed(),
            stream,
            word_pos_hi: (word_pos >> 64) as u64,
            word_pos_lo: word_pos as u64,
        }
    }

    pub fn restore(&self) -> Rng {
        let word_pos = (u128::from(self.word_pos_hi) << 64) | u128::from(self.word_pos_lo);
        Rng::restore(self.seed, self.stream, word_pos)
    }
}

/// Positions of the three streams the training loop consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRngState {
    pub batch: RngSnapshot,
    pub augment: RngSnapshot,
    pub dropout: RngSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub step_count: u64,
}

impl MemorySnapshot {
    pub fn capture(state: &MemoryState) -> Self {
        Self {
            shape: state.m.shape().to_vec(),
            data: state.m.data().to_vec(),
            step_count: state.step_count,
        }
    }

    pub fn restore(&self) -> Result<MemoryState> {
        Ok(MemoryState {
            m: Tensor::new(self.shape.clone(), self.data.clone())?,
            step_count: self.step_count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: PrionViTConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub label_scaler: LabelScaler,
    pub params: Vec<NamedTensor>,
    pub memory: MemorySnapshot,
    pub adam_m: Vec<NamedTensor>,
    pub adam_v: Vec<NamedTensor>,
    pub adam_t: u64,
    pub rng: TrainRngState,
}

impl Checkpoint {
    pub fn capture(
        model: &PrionViTConfig,
        train: &TrainConfig,
        epoch: usize,
        scaler: LabelScaler,
        params: &ModelParams,
        memory: &MemoryState,
        adam: &AdamState,
        rng: TrainRngState,
    ) -> Result<Self> {
        for (name, t) in params.entries() {
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    what: "parameter",
                    name: name.clone(),
                });
            }
        }
        let named = |tensors: &[Tensor]| -> Vec<NamedTensor> {
            params
                .entries()
                .iter()
                .zip(tensors)
                .map(|((name, _), t)| NamedTensor::from_tensor(name, t))
                .collect()
        };
        Ok(Self {
            version: CHECKPOINT_VERSION,
            model: model.clone(),
            train: train.clone(),
            epoch,
            label_scaler: scaler,
            params: params
                .entries()
                .iter()
                .map(|(n, t)| NamedTensor::from_tensor(n, t))
                .collect(),
            memory: MemorySnapshot::capture(memory),
            adam_m: named(&adam.m),
            adam_v: named(&adam.v),
            adam_t: adam.t,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .map_err(|e| Error::io(format!("create {}", parent.display()), e))?;
            }
        }
        fs::write(path, json).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Structural consistency against the embedded model config: the
    /// canonical layout must match name for name, shape for shape.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let reference = ModelParams::init(&self.model, &mut Rng::from_seed(0))?;
        let check_layout = |stored: &[NamedTensor], what: &str| -> Result<()> {
            if stored.len() != reference.len() {
                return Err(Error::Checkpoint(format!(
                    "{what}: {} tensors stored, layout has {}",
                    stored.len(),
                    reference.len()
                )));
            }
            for (nt, (name, t)) in stored.iter().zip(reference.entries()) {
                if nt.name != *name || nt.shape != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{what}: expected {name} {:?}, found {} {:?}",
                        t.shape(),
                        nt.name,
                        nt.shape
                    )));
                }
                let numel: usize = nt.shape.iter().product();
                if nt.data.len() != numel {
                    return Err(Error::Checkpoint(format!(
                        "{what}: {} holds {} values for shape {:?}",
                        nt.name,
                        nt.data.len(),
                        nt.shape
                    )));
                }
            }
            Ok(())
        };
        check_layout(&self.params, "params")?;
        check_layout(&self.adam_m, "adam_m")?;
        check_layout(&self.adam_v, "adam_v")?;
        let mem_shape = [self.model.num_tokens(), self.model.embed_dim];
        if self.memory.shape != mem_shape {
            return Err(Error::Checkpoint(format!(
                "memory shape {:?} does not match config {:?}",
                self.memory.shape, mem_shape
            )));
        }
        Ok(())
    }

    pub fn restore_params(&self) -> Result<ModelParams> {
        let entries = self
            .params
            .iter()
            .map(|nt| Ok((nt.name.clone(), nt.to_tensor()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams::from_entries(entries))
    }

    pub fn restore_memory(&self) -> Result<MemoryState> {
        self.memory.restore()
    }

    pub fn restore_adam(&self) -> Result<AdamState> {
        let tensors = |stored: &[NamedTensor]| -> Result<Vec<Tensor>> {
            stored.iter().map(NamedTensor::to_tensor).collect()
        };
        Ok(AdamState {
            m: tensors(&self.adam_m)?,
            v: tensors(&self.adam_v)?,
            t: self.adam_t,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainConfig;

    fn tiny_model() -> PrionViTConfig {
        PrionViTConfig {
            input_size: 32,
            patch_size: 16,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            ffn_dim: 16,
            head_hidden: 8,
            ..PrionViTConfig::default()
        }
    }

    fn sample_checkpoint() -> Checkpoint {
        let model = tiny_model();
        let mut rng = Rng::from_seed(5);
        let mut params = ModelParams::init(&model, &mut rng).unwrap();
        // splash in values that stress float round-tripping
        let awkward = [0.1 + 0.2, -0.0, 1e-308, 1.0 + f64::EPSILON, -3.5e17];
        for (i, v) in params.get_mut("patch.bias").data_mut().iter_mut().enumerate() {
            *v = awkward[i % awkward.len()];
        }
        let memory = MemoryState::zeros(&model);
        let adam = AdamState::new(&params);
        let streams = TrainRngState {
            batch: RngSnapshot::capture(&rng.derive(&[1])),
            augment: RngSnapshot::capture(&rng.derive(&[2])),
            dropout: RngSnapshot::capture(&rng.derive(&[3])),
        };
        Checkpoint::capture(
            &model,
            &TrainConfig::default(),
            7,
            LabelScaler { mean: 60.0, std: 34.64 },
            &params,
            &memory,
            &adam,
            streams,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.epoch, ckpt.epoch);
        assert_eq!(loaded.params.len(), ckpt.params.len());
        for (a, b) in ckpt.params.iter().zip(&loaded.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", a.name);
            }
        }
        assert_eq!(ckpt, loaded);
    }

    #[test]
    fn rng_snapshot_resumes_the_stream() {
        let mut rng = Rng::from_seed(11).derive(&[42]);
        for _ in 0..17 {
            rng.next_u64();
        }
        let snap = RngSnapshot::capture(&rng);
        let expected: Vec<u64> = (0..8).map(|_| rng.next_u64()).collect();
        let mut restored = snap.restore();
        let got: Vec<u64> = (0..8).map(|_| restored.next_u64()).collect();
        assert_eq!(expected, got);
    }

    #[test]
    fn version_and_layout_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");

        let mut wrong_version = sample_checkpoint();
        wrong_version.version = 99;
        wrong_version.save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Checkpoint(_))
        ));

        let mut wrong_shape = sample_checkpoint();
        wrong_shape.params[0].shape = vec![1, 2];
        wrong_shape.params[0].data = vec![0.0, 0.0];
        wrong_shape.save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn restores_usable_components() {
        let ckpt = sample_checkpoint();
        let params = ckpt.restore_params().unwrap();
        assert_eq!(params.len(), ckpt.params.len());
        let memory = ckpt.restore_memory().unwrap();
        assert_eq!(memory.m.shape(), [ckpt.model.num_tokens(), 8]);
        let adam = ckpt.restore_adam().unwrap();
        assert_eq!(adam.m.len(), params.len());
        assert_eq!(adam.t, 0);
    }
}
