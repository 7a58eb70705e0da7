//! Inference latency and memory benchmarking.
//!
//! The clock is injected so tests can verify warmup exclusion with scripted
//! timestamps. Peak memory is the process resident-set high-water mark,
//! which is the closest portable-enough reading Linux offers.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward, ForwardMode, InferenceMemory, MemoryState, ModelParams, PrionViTConfig, CHANNELS,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub trait Clock {
    /// Monotonic elapsed time since some fixed origin.
    fn now(&mut self) -> Duration;
}

pub struct MonotonicClock {
    start: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&mut self) -> Duration {
        self.start.elapsed()
    }
}

/// Replays a scripted sequence of timestamps.
pub struct FakeClock {
    ticks: Vec<Duration>,
    pos: usize,
}

impl FakeClock {
    pub fn from_millis(ms: &[u64]) -> Self {
        Self {
            ticks: ms.iter().map(|&m| Duration::from_millis(m)).collect(),
            pos: 0,
        }
    }
}

impl Clock for FakeClock {
    fn now(&mut self) -> Duration {
        let t = self.ticks[self.pos.min(self.ticks.len() - 1)];
        self.pos += 1;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    /// Resident-set high-water mark in MB; `None` off Linux.
    pub peak_memory_mb: Option<f64>,
    pub mean_latency_s: f64,
    pub n_runs: usize,
    pub warmup: usize,
    pub input_shape: Vec<usize>,
    pub config_hash: String,
    pub seed: u64,
}

/// Read VmHWM from /proc/self/status, in MB.
pub fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

/// Time `n_runs` single-image forward passes after `warmup` discarded
/// ones, in frozen-memory eval mode.
#[allow(clippy::too_many_arguments)]
pub fn bench_inference(
    model_cfg: &PrionViTConfig,
    params: &ModelParams,
    state: &MemoryState,
    n_runs: usize,
    warmup: usize,
    clock: &mut dyn Clock,
    label: &str,
    config_hash: &str,
    seed: u64,
) -> Result<BenchReport> {
    if n_runs < 1 {
        return Err(Error::Config("bench needs n_runs >= 1".into()));
    }
    let mut frozen_cfg = model_cfg.clone();
    frozen_cfg.inference_memory = InferenceMemory::Frozen;
    let mut local_state = state.clone();

    let mut input_rng = Rng::from_seed(seed).derive(&[0x6265_6e63]);
    let shape = vec![1, CHANNELS, model_cfg.input_size, model_cfg.input_size];
    let image = Tensor::from_fn(&shape, |_| input_rng.uniform());

    let mut measured = Duration::ZERO;
    for run in 0..warmup + n_runs {
        let begin = clock.now();
        let out = forward(
            &frozen_cfg,
            params,
            &mut local_state,
            &image,
            ForwardMode::Eval,
        )?;
        let end = clock.now();
        debug_assert_eq!(out.shape(), [1, 1]);
        if run >= warmup {
            measured += end.saturating_sub(begin);
        }
    }

    let mean_latency_s = measured.as_secs_f64() / n_runs as f64;
    if !(mean_latency_s > 0.0) {
        return Err(Error::Other(
            "clock did not advance across measured runs".into(),
        ));
    }

    Ok(BenchReport {
        label: label.to_string(),
        peak_memory_mb: peak_rss_mb(),
        mean_latency_s,
        n_runs,
        warmup,
        input_shape: shape,
        config_hash: config_hash.to_string(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_setup() -> (PrionViTConfig, ModelParams, MemoryState) {
        let cfg = PrionViTConfig {
            input_size: 32,
            patch_size: 16,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            ffn_dim: 8,
            head_hidden: 8,
            ..PrionViTConfig::default()
        };
        let params = ModelParams::init(&cfg, &mut Rng::from_seed(1)).unwrap();
        let state = MemoryState::zeros(&cfg);
        (cfg, params, state)
    }

    #[test]
    fn warmup_laps_are_excluded_from_the_mean() {
        let (cfg, params, state) = tiny_setup();
        // warmup lap takes 50 ms; the two measured laps take 2 and 3 ms
        let mut clock = FakeClock::from_millis(&[0, 50, 60, 62, 70, 73]);
        let report = bench_inference(
            &cfg, &params, &state, 2, 1, &mut clock, "tiny", "hash", 0,
        )
        .unwrap();
        assert!((report.mean_latency_s - 0.0025).abs() < 1e-12);
        assert_eq!(report.n_runs, 2);
        assert_eq!(report.warmup, 1);
    }

    #[test]
    fn single_run_mean_is_that_run() {
        let (cfg, params, state) = tiny_setup();
        let mut clock = FakeClock::from_millis(&[5, 9]);
        let report = bench_inference(
            &cfg, &params, &state, 1, 0, &mut clock, "tiny", "hash", 0,
        )
        .unwrap();
        assert!((report.mean_latency_s - 0.004).abs() < 1e-12);
    }

    #[test]
    fn real_clock_produces_positive_latency_and_schema() {
        let (cfg, params, state) = tiny_setup();
        let mut clock = MonotonicClock::new();
        let report = bench_inference(
            &cfg, &params, &state, 2, 1, &mut clock, "tiny", "hash", 7,
        )
        .unwrap();
        assert!(report.mean_latency_s > 0.0);
        assert_eq!(report.input_shape, vec![1, 3, 32, 32]);
        let json = serde_json::to_string(&report).unwrap();
        for key in [
            "label",
            "peak_memory_mb",
            "mean_latency_s",
            "n_runs",
            "warmup",
            "input_shape",
            "config_hash",
            "seed",
        ] {
            assert!(json.contains(&format!("\"{key}\"")), "missing {key}");
        }
    }

    #[test]
    fn zero_runs_is_rejected() {
        let (cfg, params, state) = tiny_setup();
        let mut clock = MonotonicClock::new();
        let err = bench_inference(
            &cfg, &params, &state, 0, 0, &mut clock, "tiny", "hash", 0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[cfg(target_os = "linux")]
    #[test]
    fn peak_rss_reads_on_linux() {
        let peak = peak_rss_mb().unwrap();
        assert!(peak > 1.0, "{peak}");
    }
}
