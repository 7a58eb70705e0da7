//! Loss, optimizer, and the training/evaluation loops.
//!
//! Training is deliberately plain: shuffle, batch, augment, forward with
//! stateful memory, MSE on normalized targets, Adam, then a frozen-memory
//! validation pass per epoch. Best-validation-MAE selection decides the
//! returned model. Every random draw comes from named substreams of the
//! run seed, so one (seed, config) pair fixes the whole trajectory.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, ValueId};
use crate::checkpoint::{Checkpoint, RngSnapshot, TrainRngState};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{
    bind_params, dropout_mask, forward, forward_on_tape, ForwardMode, InferenceMemory,
    MemoryPersistence, MemoryState, ModelParams, PrionViTConfig,
};
use crate::pipeline::{augment, make_batches, stack_batch, AugmentConfig, Sample, Split};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Write a rolling checkpoint every this many epochs; 0 disables the
    /// cadence (best/final checkpoints are always written).
    pub checkpoint_every: usize,
    /// Standardize targets to zero mean and unit variance on the train
    /// split before computing the loss.
    pub normalize_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_every: 10,
            normalize_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

// ── loss ─────────────────────────────────────────────────────────────────

/// Mean squared error between `[B,1]` predictions and targets, recorded on
/// the tape so it can be differentiated.
pub fn mse_loss(tape: &mut Tape, pred: ValueId, target: ValueId) -> Result<ValueId> {
    let (p_shape, t_shape) = (tape.value(pred).shape(), tape.value(target).shape());
    if p_shape != t_shape {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: p_shape.to_vec(),
            rhs: t_shape.to_vec(),
        });
    }
    if tape.value(pred).numel() == 0 {
        return Err(Error::EmptyDataset("mse_loss over an empty batch".into()));
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

// ── target scaling ───────────────────────────────────────────────────────

/// Affine map between degrees Celsius and the model's output scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScaler {
    pub mean: f64,
    pub std: f64,
}

impl LabelScaler {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    /// Fit to the training labels; constant labels fall back to unit scale
    /// so the map stays invertible.
    pub fn fit(labels: &[f64]) -> Self {
        if labels.is_empty() {
            return Self::identity();
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-9 { std } else { 1.0 },
        }
    }

    pub fn normalize(&self, celsius: f64) -> f64 {
        (celsius - self.mean) / self.std
    }

    pub fn denormalize(&self, scaled: f64) -> f64 {
        scaled * self.std + self.mean
    }
}

// ── optimizer ────────────────────────────────────────────────────────────

/// Adam moments, index-aligned with the canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam update over all parameters. `grads` must be index-aligned with
/// `params.entries()`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Config(format!(
            "adam_step got {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for (i, ((name, p), g)) in params.entries_mut().zip(grads).enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                name: name.to_string(),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = p.data_mut();
        for ((th, (m_i, v_i)), g_i) in theta.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g.data()) {
            *m_i = cfg.beta1 * *m_i + (1.0 - cfg.beta1) * g_i;
            *v_i = cfg.beta2 * *v_i + (1.0 - cfg.beta2) * g_i * g_i;
            let m_hat = *m_i / bias1;
            let v_hat = *v_i / bias2;
            *th -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

// ── history ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean train loss over the epoch, in normalized target units.
    pub train_loss: f64,
    pub val: MetricsReport,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Copy with wall times zeroed, for determinism comparisons; timing is
    /// the one field two identical runs legitimately disagree on.
    pub fn without_wall_times(&self) -> TrainHistory {
        let mut out = self.clone();
        for e in &mut out.epochs {
            e.wall_time_s = 0.0;
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Other(format!("open {}: {e}", path.display())))?;
        w.write_record([
            "epoch",
            "train_loss",
            "val_mse",
            "val_mae",
            "val_rmse",
            "val_max_error",
            "val_r2",
            "wall_time_s",
        ])
        .map_err(|e| Error::Other(format!("write {}: {e}", path.display())))?;
        for e in &self.epochs {
            let r2 = e.val.r2.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val.mse.to_string(),
                e.val.mae.to_string(),
                e.val.rmse.to_string(),
                e.val.max_error.to_string(),
                r2,
                e.wall_time_s.to_string(),
            ])
            .map_err(|e| Error::Other(format!("write {}: {e}", path.display())))?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("flush {}", path.display()), e))
    }
}

// ── evaluation ───────────────────────────────────────────────────────────

/// Run the model over `indices` and return `(predictions, targets)` in
/// degrees Celsius. Memory is always treated as frozen here, whatever the
/// config says, and every sample runs as its own single-row forward, so
/// no prediction can depend on which other samples share the call.
pub fn predictions(
    model_cfg: &PrionViTConfig,
    params: &ModelParams,
    state: &MemoryState,
    samples: &[Sample],
    indices: &[usize],
    batch_size: usize,
    scaler: &LabelScaler,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset("no samples to evaluate".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut frozen_cfg = model_cfg.clone();
    frozen_cfg.inference_memory = InferenceMemory::Frozen;
    let predict_one = |&index: &usize| -> Result<(f64, f64)> {
        let one = [&samples[index]];
        let (image, labels) = stack_batch(&one)?;
        let mut local_state = state.clone();
        let out = forward(&frozen_cfg, params, &mut local_state, &image, ForwardMode::Eval)?;
        Ok((scaler.denormalize(out.data()[0]), labels[0]))
    };

    let pairs: Vec<(f64, f64)> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            indices.par_iter().map(predict_one).collect::<Result<_>>()?
        }
        #[cfg(not(feature = "parallel"))]
        {
            indices.iter().map(predict_one).collect::<Result<_>>()?
        }
    };
    Ok(pairs.into_iter().unzip())
}

/// Frozen-memory evaluation of one split.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model_cfg: &PrionViTConfig,
    params: &ModelParams,
    state: &MemoryState,
    samples: &[Sample],
    indices: &[usize],
    batch_size: usize,
    scaler: &LabelScaler,
    split_name: &str,
    config_hash: &str,
    seed: u64,
) -> Result<MetricsReport> {
    let (preds, targets) = predictions(
        model_cfg, params, state, samples, indices, batch_size, scaler,
    )?;
    compute_metrics(split_name, &preds, &targets, config_hash, seed)
}

// ── training loop ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best-validation-MAE epoch.
    pub params: ModelParams,
    /// Memory snapshot taken at the same epoch as `params`.
    pub memory: MemoryState,
    pub history: TrainHistory,
    pub scaler: LabelScaler,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

struct EpochSnapshot {
    params: ModelParams,
    memory: MemoryState,
    epoch: usize,
}

/// Train on `split.train`, validating on `split.val` each epoch. Returns
/// the best-validation model. When `out_dir` is set, writes `best.json`
/// and a rolling `last.json` checkpoint there.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model_cfg: &PrionViTConfig,
    train_cfg: &TrainConfig,
    augment_cfg: &AugmentConfig,
    samples: &[Sample],
    split: &Split,
    out_dir: Option<&Path>,
    config_hash: &str,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    augment_cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::EmptyDataset("train split is empty".into()));
    }
    if split.val.is_empty() {
        return Err(Error::EmptyDataset("validation split is empty".into()));
    }
    if let Some(&bad) = split
        .train
        .iter()
        .chain(&split.val)
        .find(|&&i| i >= samples.len())
    {
        return Err(Error::Config(format!(
            "split references sample {bad} but only {} are loaded",
            samples.len()
        )));
    }

    let root = Rng::from_seed(train_cfg.seed);
    let mut init_rng = root.derive(&[0x696e_6974]);
    let mut batch_rng = root.derive(&[0x6261_7463]);
    let mut augment_rng = root.derive(&[0x6175_676d]);
    let mut dropout_rng = root.derive(&[0x64726f70]);

    let train_labels: Vec<f64> = split.train.iter().map(|&i| samples[i].label_c).collect();
    let scaler = if train_cfg.normalize_targets {
        LabelScaler::fit(&train_labels)
    } else {
        LabelScaler::identity()
    };

    let mut params = ModelParams::init(model_cfg, &mut init_rng)?;
    let mut adam = AdamState::new(&params);
    let mut memory = MemoryState::zeros(model_cfg);
    let mut history = TrainHistory::default();

    let mut best: Option<EpochSnapshot> = None;
    let mut best_val_mae = f64::INFINITY;
    let mut last_good = EpochSnapshot {
        params: params.clone(),
        memory: memory.clone(),
        epoch: 0,
    };

    for epoch in 1..=train_cfg.epochs {
        let epoch_start = Instant::now();
        let batches = make_batches(&split.train, train_cfg.batch_size, &mut batch_rng, false)?;
        let mut loss_sum = 0.0;
        let mut sample_count = 0usize;

        for batch in &batches {
            let augmented: Vec<Sample> = batch
                .iter()
                .map(|&i| {
                    if augment_cfg.enabled {
                        augment(&samples[i], augment_cfg, &mut augment_rng)
                    } else {
                        Ok(samples[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Sample> = augmented.iter().collect();
            let (images, labels) = stack_batch(&refs)?;
            let target = Tensor::new(
                vec![labels.len(), 1],
                labels.iter().map(|&t| scaler.normalize(t)).collect(),
            )?;

            let mut tape = Tape::new();
            let image_id = tape.constant(images);
            let bound = bind_params(&mut tape, &params, true);
            let memory_in = model_cfg.memory_enabled.then(|| tape.constant(memory.m.clone()));
            let mask = dropout_mask(
                &mut dropout_rng,
                batch.len(),
                model_cfg.head_hidden,
                model_cfg.dropout_rate,
            );
            let pass = forward_on_tape(
                &mut tape,
                image_id,
                memory_in,
                &bound,
                model_cfg,
                Some(&mask),
            )?;
            let target_id = tape.constant(target);
            let loss_id = mse_loss(&mut tape, pass.prediction, target_id)?;
            let loss = tape.value(loss_id).item();
            if !loss.is_finite() {
                save_divergence_checkpoint(
                    model_cfg, train_cfg, &last_good, &adam, &scaler, out_dir,
                    &batch_rng, &augment_rng, &dropout_rng,
                );
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss became {loss} on a batch of {}", batch.len()),
                });
            }
            let new_memory_value = pass.new_memory.map(|id| {
                // read before backward consumes the tape
                (id, tape.value(id).clone())
            });
            let grads_by_id = tape.backward(loss_id)?;
            let grads: Vec<Tensor> = params
                .entries()
                .iter()
                .map(|(name, t)| {
                    grads_by_id
                        .get(bound.id(name))
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.shape()))
                })
                .collect();
            if let Some(bad) = grads
                .iter()
                .position(|g| !g.data().iter().all(|v| v.is_finite()))
            {
                save_divergence_checkpoint(
                    model_cfg, train_cfg, &last_good, &adam, &scaler, out_dir,
                    &batch_rng, &augment_rng, &dropout_rng,
                );
                return Err(Error::Diverged {
                    epoch,
                    detail: format!(
                        "gradient for {} became non-finite",
                        params.entries()[bad].0
                    ),
                });
            }
            adam_step(&mut params, &grads, &mut adam, train_cfg)?;

            if let Some((_, new_m)) = new_memory_value {
                if model_cfg.memory_persistence == MemoryPersistence::Stateful {
                    memory.m = new_m;
                    memory.step_count += 1;
                }
            }
            loss_sum += loss * batch.len() as f64;
            sample_count += batch.len();
        }

        let train_loss = loss_sum / sample_count as f64;
        let val = evaluate(
            model_cfg,
            &params,
            &memory,
            samples,
            &split.val,
            train_cfg.batch_size,
            &scaler,
            "val",
            config_hash,
            train_cfg.seed,
        )?;

        if val.mae < best_val_mae {
            best_val_mae = val.mae;
            best = Some(EpochSnapshot {
                params: params.clone(),
                memory: memory.clone(),
                epoch,
            });
            if let Some(dir) = out_dir {
                let ckpt = Checkpoint::capture(
                    model_cfg,
                    train_cfg,
                    epoch,
                    scaler,
                    &params,
                    &memory,
                    &adam,
                    rng_state(&batch_rng, &augment_rng, &dropout_rng),
                )?;
                ckpt.save(&dir.join("best.json"))?;
            }
        }

        last_good = EpochSnapshot {
            params: params.clone(),
            memory: memory.clone(),
            epoch,
        };
        if let Some(dir) = out_dir {
            let at_cadence =
                train_cfg.checkpoint_every > 0 && epoch % train_cfg.checkpoint_every == 0;
            if at_cadence || epoch == train_cfg.epochs {
                let ckpt = Checkpoint::capture(
                    model_cfg,
                    train_cfg,
                    epoch,
                    scaler,
                    &params,
                    &memory,
                    &adam,
                    rng_state(&batch_rng, &augment_rng, &dropout_rng),
                )?;
                ckpt.save(&dir.join("last.json"))?;
            }
        }

        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val,
            wall_time_s: epoch_start.elapsed().as_secs_f64(),
        });
    }

    let best = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best.params,
        memory: best.memory,
        history,
        scaler,
        best_epoch: best.epoch,
        best_val_mae,
    })
}

fn rng_state(batch: &Rng, augment: &Rng, dropout: &Rng) -> TrainRngState {
    TrainRngState {
        batch: RngSnapshot::capture(batch),
        augment: RngSnapshot::capture(augment),
        dropout: RngSnapshot::capture(dropout),
    }
}

#[allow(clippy::too_many_arguments)]
fn save_divergence_checkpoint(
    model_cfg: &PrionViTConfig,
    train_cfg: &TrainConfig,
    last_good: &EpochSnapshot,
    adam: &AdamState,
    scaler: &LabelScaler,
    out_dir: Option<&Path>,
    batch: &Rng,
    augment: &Rng,
    dropout: &Rng,
) {
    let Some(dir) = out_dir else { return };
    let ckpt = Checkpoint::capture(
        model_cfg,
        train_cfg,
        last_good.epoch,
        *scaler,
        &last_good.params,
        &last_good.memory,
        adam,
        rng_state(batch, augment, dropout),
    );
    if let Ok(ckpt) = ckpt {
        let _ = ckpt.save(&dir.join("last.json"));
    }
}
