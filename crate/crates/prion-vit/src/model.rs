//! The Prion-ViT network: patch embedding with learned positions, pre-LN
//! transformer blocks, a shared gated memory updated after every block, and
//! a pooled regression head.
//!
//! The memory mechanism keeps one `N x D` state `M` shared by all blocks.
//! After block `l` produces tokens `X`, a sigmoid gate `G = sigma(X W_g + b_g)`
//! mixes memory and tokens into per-sample candidates
//! `M_b = G_b (.) M + (1 - G_b) (.) X_b`, which average into the new memory
//! `M' = (1/B) sum_b M_b`. In `per_sample` mode each sample continues with its
//! own `M_b`; in `literal` mode every sample continues with the broadcast `M'`,
//! which collapses the batch to one shared token stream. Disabling the memory
//! reduces the model to a plain ViT with identical remaining weights.
//!
//! Memory entering a forward pass is always a constant: gradients reach all
//! memory steps inside one pass but never cross into earlier passes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    PerSample,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryPersistence {
    Stateful,
    Stateless,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMemory {
    Frozen,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrionViTConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub head_hidden: usize,
    pub dropout_rate: f64,
    pub memory_enabled: bool,
    pub memory_mode: MemoryMode,
    pub memory_persistence: MemoryPersistence,
    pub inference_memory: InferenceMemory,
}

impl Default for PrionViTConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            patch_size: 16,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            ffn_dim: 128,
            head_hidden: 2048,
            dropout_rate: 0.5,
            memory_enabled: true,
            memory_mode: MemoryMode::PerSample,
            memory_persistence: MemoryPersistence::Stateful,
            inference_memory: InferenceMemory::Frozen,
        }
    }
}

impl PrionViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_size", self.input_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by patch_size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Tokens per image: one per 16x16 patch.
    pub fn num_tokens(&self) -> usize {
        let per_side = self.input_size / self.patch_size;
        per_side * per_side
    }

    /// Flattened patch length fed to the embedding map.
    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub m: Tensor,
    pub step_count: u64,
}

impl MemoryState {
    pub fn zeros(config: &PrionViTConfig) -> Self {
        Self {
            m: Tensor::zeros(&[config.num_tokens(), config.embed_dim]),
            step_count: 0,
        }
    }

    pub fn validate(&self, config: &PrionViTConfig) -> Result<()> {
        let expect = [config.num_tokens(), config.embed_dim];
        if self.m.shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "memory_state",
                lhs: self.m.shape().to_vec(),
                rhs: expect.to_vec(),
            });
        }
        if !self.m.is_finite() {
            return Err(Error::NonFinite {
                what: "memory",
                name: "memory_state".into(),
            });
        }
        Ok(())
    }
}

/// All learnable tensors in a fixed canonical order. The order defines the
/// layout of optimizer moments and checkpoints, so it must not change
/// between versions.
#[derive(Debug, Clone)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Seeded initialization: weights from N(0, 0.02), biases and the gate
    /// parameters zero (so every gate starts at 0.5), layer-norm at
    /// identity. The gate draws nothing from the stream, so enabling or
    /// disabling the memory leaves all other initial weights unchanged for
    /// a given seed.
    pub fn init(config: &PrionViTConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let n = config.num_tokens();
        let p = config.patch_dim();
        let f = config.ffn_dim;
        let hh = config.head_hidden;
        const STD: f64 = 0.02;

        let mut entries: Vec<(String, Tensor)> = Vec::new();
        let randn =
            |shape: &[usize], rng: &mut Rng| Tensor::from_fn(shape, |_| rng.normal(0.0, STD));

        entries.push(("patch.weight".into(), randn(&[p, d], rng)));
        entries.push(("patch.bias".into(), Tensor::zeros(&[d])));
        entries.push(("pos_embed".into(), randn(&[n, d], rng)));
        for i in 0..config.num_blocks {
            let pre = format!("block{i}");
            entries.push((format!("{pre}.ln1.gamma"), Tensor::ones(&[d])));
            entries.push((format!("{pre}.ln1.beta"), Tensor::zeros(&[d])));
            for proj in ["q", "k", "v", "o"] {
                entries.push((format!("{pre}.attn.w{proj}"), randn(&[d, d], rng)));
                entries.push((format!("{pre}.attn.b{proj}"), Tensor::zeros(&[d])));
            }
            entries.push((format!("{pre}.ln2.gamma"), Tensor::ones(&[d])));
            entries.push((format!("{pre}.ln2.beta"), Tensor::zeros(&[d])));
            entries.push((format!("{pre}.ffn.w1"), randn(&[d, f], rng)));
            entries.push((format!("{pre}.ffn.b1"), Tensor::zeros(&[f])));
            entries.push((format!("{pre}.ffn.w2"), randn(&[f, d], rng)));
            entries.push((format!("{pre}.ffn.b2"), Tensor::zeros(&[d])));
        }
        entries.push(("gate.wg".into(), Tensor::zeros(&[d, d])));
        entries.push(("gate.bg".into(), Tensor::zeros(&[d])));
        entries.push(("head.w1".into(), randn(&[d, hh], rng)));
        entries.push(("head.b1".into(), Tensor::zeros(&[hh])));
        entries.push(("head.w2".into(), randn(&[hh, 1], rng)));
        entries.push(("head.b2".into(), Tensor::zeros(&[1])));

        Ok(Self::from_entries(entries))
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.clone(), i))
            .collect();
        Self { entries, index }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries[self.index[name]].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Parameter leaves registered on a tape for one forward pass.
pub struct Bound {
    ids: HashMap<String, ValueId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> ValueId {
        self.ids[name]
    }
}

pub fn bind_params(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Bound {
    let ids = params
        .entries()
        .iter()
        .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone(), trainable)))
        .collect();
    Bound { ids }
}

// ── architecture pieces ──────────────────────────────────────────────────

const LN_EPS: f64 = 1e-5;

/// Cut the batch into 16x16 patches, apply the shared linear embedding, and
/// add positional embeddings. `images` is `[B, 3, S, S]`.
pub fn patchify_embed(
    tape: &mut Tape,
    images: ValueId,
    bound: &Bound,
    config: &PrionViTConfig,
) -> Result<ValueId> {
    let shape = tape.value(images).shape().to_vec();
    let [b, c, h, w] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "patchify_embed",
            shape,
            reason: "expected [B, C, H, W]".into(),
        });
    };
    let ps = config.patch_size;
    if c != CHANNELS || h != config.input_size || w != config.input_size || h % ps != 0 {
        return Err(Error::InvalidShape {
            op: "patchify_embed",
            shape,
            reason: format!(
                "expected [B, {CHANNELS}, {0}, {0}] divisible into {ps}x{ps} patches",
                config.input_size
            ),
        });
    }
    let side = h / ps;
    // [B,C,H,W] -> [B,C,side,ps,side,ps] -> [B,side,side,C,ps,ps] -> [B,N,P]
    let split = tape.reshape(images, &[b, c, side, ps, side, ps])?;
    let grouped = tape.permute(split, &[0, 2, 4, 1, 3, 5])?;
    let flat = tape.reshape(grouped, &[b, side * side, config.patch_dim()])?;
    let embedded = tape.matmul(flat, bound.id("patch.weight"))?;
    let biased = tape.add(embedded, bound.id("patch.bias"))?;
    tape.add(biased, bound.id("pos_embed"))
}

/// Multihead self-attention over `[B, N, D]` tokens.
pub fn mhsa(
    tape: &mut Tape,
    x: ValueId,
    bound: &Bound,
    block: usize,
    config: &PrionViTConfig,
) -> Result<ValueId> {
    let [b, n, d] = tape.value(x).shape() else {
        return Err(Error::InvalidShape {
            op: "mhsa",
            shape: tape.value(x).shape().to_vec(),
            reason: "expected [B, N, D]".into(),
        });
    };
    let (b, n, d) = (*b, *n, *d);
    let heads = config.num_heads;
    let dh = config.head_dim();
    let pre = format!("block{block}.attn");

    let project = |tape: &mut Tape, which: &str| -> Result<ValueId> {
        let p = tape.matmul(x, bound.id(&format!("{pre}.w{which}")))?;
        let p = tape.add(p, bound.id(&format!("{pre}.b{which}")))?;
        // [B,N,D] -> [B,N,H,dh] -> [B,H,N,dh]
        let split = tape.reshape(p, &[b, n, heads, dh])?;
        tape.permute(split, &[0, 2, 1, 3])
    };
    let q = project(tape, "q")?;
    let k = project(tape, "k")?;
    let v = project(tape, "v")?;

    let scores = tape.matmul_trans_b(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let att = tape.softmax(scaled, 3)?;
    let ctx = tape.matmul(att, v)?;
    let merged = tape.permute(ctx, &[0, 2, 1, 3])?;
    let concat = tape.reshape(merged, &[b, n, d])?;
    let out = tape.matmul(concat, bound.id(&format!("{pre}.wo")))?;
    tape.add(out, bound.id(&format!("{pre}.bo")))
}

/// Pre-LN block: `X1 = X + MHSA(LN1(X)); X2 = X1 + FFN(LN2(X1))`.
pub fn transformer_block(
    tape: &mut Tape,
    x: ValueId,
    bound: &Bound,
    block: usize,
    config: &PrionViTConfig,
) -> Result<ValueId> {
    let pre = format!("block{block}");
    let ln1 = tape.layer_norm(
        x,
        bound.id(&format!("{pre}.ln1.gamma")),
        bound.id(&format!("{pre}.ln1.beta")),
        LN_EPS,
    )?;
    let attended = mhsa(tape, ln1, bound, block, config)?;
    let x1 = tape.add(x, attended)?;

    let ln2 = tape.layer_norm(
        x1,
        bound.id(&format!("{pre}.ln2.gamma")),
        bound.id(&format!("{pre}.ln2.beta")),
        LN_EPS,
    )?;
    let h = tape.matmul(ln2, bound.id(&format!("{pre}.ffn.w1")))?;
    let h = tape.add(h, bound.id(&format!("{pre}.ffn.b1")))?;
    let h = tape.relu(h);
    let h = tape.matmul(h, bound.id(&format!("{pre}.ffn.w2")))?;
    let h = tape.add(h, bound.id(&format!("{pre}.ffn.b2")))?;
    tape.add(x1, h)
}

/// `G = sigmoid(X W_g + b_g)`, entries strictly inside (0,1).
pub fn compute_gate(tape: &mut Tape, x: ValueId, wg: ValueId, bg: ValueId) -> Result<ValueId> {
    let z = tape.matmul(x, wg)?;
    let z = tape.add(z, bg)?;
    Ok(tape.sigmoid(z))
}

/// Per-sample gated candidates `M_b = G_b (.) M + (1 - G_b) (.) X_b`
/// followed by the batch average `M' = (1/B) sum_b M_b`.
/// Returns (candidates `[B,N,D]`, M' `[N,D]`).
pub fn update_memory(
    tape: &mut Tape,
    m: ValueId,
    x: ValueId,
    g: ValueId,
) -> Result<(ValueId, ValueId)> {
    let retained = tape.mul(g, m)?;
    let inverted = tape.one_minus(g);
    let injected = tape.mul(inverted, x)?;
    let candidates = tape.add(retained, injected)?;
    let aggregated = tape.mean_axis(candidates, 0)?;
    Ok((candidates, aggregated))
}

/// `[N,D]` memory replicated over the batch axis.
pub fn broadcast_memory(tape: &mut Tape, m: ValueId, batch: usize) -> Result<ValueId> {
    let [n, d] = tape.value(m).shape() else {
        return Err(Error::InvalidShape {
            op: "broadcast_memory",
            shape: tape.value(m).shape().to_vec(),
            reason: "expected [N, D] memory".into(),
        });
    };
    let (n, d) = (*n, *d);
    tape.broadcast_to(m, &[batch, n, d])
}

/// One memory interaction after a transformer block. In `per_sample` mode
/// each sample continues with its own candidate; in `literal` mode all
/// samples continue with the broadcast aggregate.
pub fn prion_layer_step(
    tape: &mut Tape,
    x: ValueId,
    m: ValueId,
    bound: &Bound,
    mode: MemoryMode,
) -> Result<(ValueId, ValueId)> {
    let x_shape = tape.value(x).shape().to_vec();
    let m_shape = tape.value(m).shape().to_vec();
    if x_shape.len() != 3 || m_shape != x_shape[1..] {
        return Err(Error::ShapeMismatch {
            op: "prion_layer_step",
            lhs: m_shape,
            rhs: x_shape,
        });
    }
    let g = compute_gate(tape, x, bound.id("gate.wg"), bound.id("gate.bg"))?;
    let (candidates, aggregated) = update_memory(tape, m, x, g)?;
    let x_next = match mode {
        MemoryMode::PerSample => candidates,
        MemoryMode::Literal => broadcast_memory(tape, aggregated, x_shape[0])?,
    };
    Ok((x_next, aggregated))
}

/// Global average pool over tokens, dense to `head_hidden` with ReLU,
/// optional inverted-scaling dropout mask, final dense to one output.
pub fn regression_head(
    tape: &mut Tape,
    x: ValueId,
    bound: &Bound,
    dropout_mask: Option<&Tensor>,
) -> Result<ValueId> {
    let pooled = tape.mean_axis(x, 1)?;
    let h = tape.matmul(pooled, bound.id("head.w1"))?;
    let h = tape.add(h, bound.id("head.b1"))?;
    let mut h = tape.relu(h);
    if let Some(mask) = dropout_mask {
        let mask_id = tape.constant(mask.clone());
        h = tape.mul(h, mask_id)?;
    }
    let y = tape.matmul(h, bound.id("head.w2"))?;
    tape.add(y, bound.id("head.b2"))
}

/// Bernoulli keep-mask with inverted scaling; all-ones when rate is 0.
pub fn dropout_mask(rng: &mut Rng, batch: usize, width: usize, rate: f64) -> Tensor {
    if rate <= 0.0 {
        return Tensor::ones(&[batch, width]);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Tensor::from_fn(&[batch, width], |_| {
        if rng.bernoulli(keep) {
            scale
        } else {
            0.0
        }
    })
}

/// Everything the training loop needs from one on-tape forward pass.
pub struct ForwardPass {
    pub prediction: ValueId,
    /// Aggregated memory after the final block, when the memory is enabled.
    pub new_memory: Option<ValueId>,
}

/// Record the full forward computation on `tape`. `memory_in` must be a
/// `[N,D]` constant leaf when the memory is enabled; gradients stop there.
pub fn forward_on_tape(
    tape: &mut Tape,
    images: ValueId,
    memory_in: Option<ValueId>,
    bound: &Bound,
    config: &PrionViTConfig,
    dropout: Option<&Tensor>,
) -> Result<ForwardPass> {
    if config.memory_enabled && memory_in.is_none() {
        return Err(Error::Config(
            "memory is enabled but no memory state was bound".into(),
        ));
    }
    let mut x = patchify_embed(tape, images, bound, config)?;
    let mut m_cur = memory_in;
    for block in 0..config.num_blocks {
        x = transformer_block(tape, x, bound, block, config)?;
        if config.memory_enabled {
            let m = m_cur.expect("checked above");
            let (x_next, m_next) = prion_layer_step(tape, x, m, bound, config.memory_mode)?;
            x = x_next;
            m_cur = Some(m_next);
        }
    }
    let prediction = regression_head(tape, x, bound, dropout)?;
    Ok(ForwardPass {
        prediction,
        new_memory: config.memory_enabled.then(|| m_cur.expect("checked above")),
    })
}

pub enum ForwardMode<'a> {
    Train { dropout_rng: &'a mut Rng },
    Eval,
}

/// Finite-difference check of the full model loss against the tape
/// gradients, over every parameter tensor.
///
/// The check runs at a jittered generic point rather than the exact init:
/// freshly initialized biases are all zero, which parks ReLU preactivations
/// on their kinks where no finite difference is meaningful. Dropout is off
/// (the mask would change under perturbation); the memory path, when
/// enabled, runs with a random nonzero state so gate gradients are
/// exercised.
pub fn model_grad_check(
    config: &PrionViTConfig,
    batch: usize,
    settings: &crate::gradcheck::GradCheckSettings,
    seed: u64,
) -> Result<crate::gradcheck::GradCheckReport> {
    config.validate()?;
    if batch == 0 {
        return Err(Error::Config("model_grad_check needs batch >= 1".into()));
    }
    let root = Rng::from_seed(seed);
    let mut params = ModelParams::init(config, &mut root.derive(&[0x696e_6974]))?;
    let mut jitter = root.derive(&[0x6a69_7474]);
    for (_, t) in params.entries_mut() {
        for v in t.data_mut() {
            *v += jitter.normal(0.0, 0.05);
        }
    }
    let mut data_rng = root.derive(&[0x6461_7461]);
    let images = Tensor::from_fn(
        &[batch, CHANNELS, config.input_size, config.input_size],
        |_| data_rng.uniform(),
    );
    let memory = config.memory_enabled.then(|| {
        Tensor::from_fn(&[config.num_tokens(), config.embed_dim], |_| {
            data_rng.normal(0.0, 0.1)
        })
    });
    let targets = Tensor::from_fn(&[batch, 1], |_| data_rng.uniform());

    let named: Vec<(String, Tensor)> = params.entries().to_vec();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let cfg = config.clone();
    crate::gradcheck::grad_check(&named, settings, move |tape, ids| {
        let bound = Bound {
            ids: names.iter().cloned().zip(ids.iter().copied()).collect(),
        };
        let images_id = tape.constant(images.clone());
        let memory_id = memory.clone().map(|m| tape.constant(m));
        let pass = forward_on_tape(tape, images_id, memory_id, &bound, &cfg, None)?;
        let target_id = tape.constant(targets.clone());
        let diff = tape.sub(pass.prediction, target_id)?;
        let sq = tape.mul(diff, diff)?;
        Ok(tape.mean_all(sq))
    })
}

/// Run one forward pass in value space and apply the configured memory
/// write-back policy: training writes when stateful, eval writes only in
/// online mode. Returns `[B,1]` predictions.
pub fn forward(
    config: &PrionViTConfig,
    params: &ModelParams,
    state: &mut MemoryState,
    images: &Tensor,
    mode: ForwardMode,
) -> Result<Tensor> {
    config.validate()?;
    if config.memory_enabled {
        state.validate(config)?;
    }
    let batch = *images.shape().first().ok_or_else(|| Error::InvalidShape {
        op: "forward",
        shape: images.shape().to_vec(),
        reason: "empty batch".into(),
    })?;

    let mut tape = Tape::new();
    let image_id = tape.constant(images.clone());
    let bound = bind_params(&mut tape, params, false);
    let memory_in = config
        .memory_enabled
        .then(|| tape.constant(state.m.clone()));

    let (mask, training) = match mode {
        ForwardMode::Train { dropout_rng } => (
            Some(dropout_mask(
                dropout_rng,
                batch,
                config.head_hidden,
                config.dropout_rate,
            )),
            true,
        ),
        ForwardMode::Eval => (None, false),
    };

    let pass = forward_on_tape(&mut tape, image_id, memory_in, &bound, config, mask.as_ref())?;
    let predictions = tape.value(pass.prediction).clone();

    if let Some(new_m) = pass.new_memory {
        let write = if training {
            config.memory_persistence == MemoryPersistence::Stateful
        } else {
            config.inference_memory == InferenceMemory::Online
        };
        if write {
            state.m = tape.value(new_m).clone();
            state.step_count += 1;
        }
    }
    Ok(predictions)
}
