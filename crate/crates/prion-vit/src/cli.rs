//! Command-line harness.
//!
//! `cli_dispatch` is the whole program as a library function returning the
//! process exit code, so integration tests can drive every subcommand
//! in-process. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench::{bench_inference, MonotonicClock};
use crate::checkpoint::Checkpoint;
use crate::config::{DataConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckSettings;
use crate::model::{model_grad_check, MemoryMode, MemoryState, ModelParams, PrionViTConfig};
use crate::pipeline::{load_manifest, load_samples, split_indices, Split};
use crate::plot::{emit_scatter, read_scatter_csv, scatter_svg};
use crate::report::{config_hash, run_ablation};
use crate::rng::Rng;
use crate::speckle::{generate_dataset, FiberModeSet};
use crate::train::{evaluate, predictions, train, TrainOutcome};

#[derive(Parser)]
#[command(
    name = "prion-vit",
    version,
    about = "Specklegram-to-temperature regression: synthetic data, training, ablation, benchmarks"
)]
struct Cli {
    /// Run seed; overrides PRION_VIT_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for reports, checkpoints, and plots.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic specklegram dataset and its manifest.
    GenData {
        /// Read dataset parameters from this config's `data` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        t_min: Option<f64>,
        #[arg(long)]
        t_max: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
        /// Side length of the generated images in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Number of interfering fiber modes.
        #[arg(long)]
        modes: Option<usize>,
        /// Where to write images and manifest.csv (defaults to the config's
        /// data dir).
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Train the configured model; writes history.csv, metrics_val.json,
    /// and checkpoints under --out-dir.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one split; writes metrics_<split>.json and
    /// the prediction scatter.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to evaluate (defaults to <out-dir>/best.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train the memory-enabled and memory-disabled variants under one
    /// seed and compare; writes ablation.json.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Measure single-image inference latency and peak memory; writes
    /// bench.json.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Bench these trained weights instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference validation of model gradients in both memory
    /// modes.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 64)]
        max_coords: usize,
    },
    /// Re-render scatter.svg from an existing scatter.csv.
    Plot {
        /// Input CSV (defaults to <out-dir>/scatter.csv).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

/// Parse `argv` and run. Returns the process exit code instead of exiting,
/// so tests can call it directly.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_run_config(path: &Path, cli_seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_seed_override(cli_seed)?;
    Ok(cfg)
}

struct LoadedData {
    samples: Vec<crate::pipeline::Sample>,
    split: Split,
}

fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let manifest = load_manifest(&cfg.data.manifest_path())?;
    let samples = load_samples(
        &manifest,
        cfg.model.input_size,
        cfg.data.cache_dir().as_deref(),
    )?;
    let split = split_indices(samples.len(), &cfg.data.split)?;
    Ok(LoadedData { samples, split })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Other(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, json).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out_dir)
        .map_err(|e| Error::io(format!("create {}", cli.out_dir.display()), e))?;
    match cli.command {
        Command::GenData {
            config,
            t_min,
            t_max,
            step,
            size,
            modes,
            data_dir,
        } => {
            let mut data = match config {
                Some(path) => ExperimentConfig::load(&path)?.data,
                None => DataConfig::default(),
            };
            if let Some(v) = t_min {
                data.t_min = v;
            }
            if let Some(v) = t_max {
                data.t_max = v;
            }
            if let Some(v) = step {
                data.step = v;
            }
            if let Some(v) = size {
                data.speckle_size = v;
            }
            if let Some(v) = modes {
                data.mode_count = v;
            }
            if let Some(dir) = data_dir {
                data.dir = dir;
            }
            if let Some(seed) = crate::config::seed_override(cli.seed)? {
                data.fiber_seed = seed;
            }
            data.validate()?;
            let fiber = FiberModeSet::new(data.fiber_seed, data.mode_count)?;
            let manifest = generate_dataset(
                &fiber,
                data.t_min,
                data.t_max,
                data.step,
                data.speckle_size,
                &data.dir,
            )?;
            println!(
                "wrote {} images and {} to {}",
                manifest.entries.len(),
                manifest.csv_path().display(),
                data.dir.display()
            );
            Ok(())
        }
        Command::Train { config } => {
            let cfg = load_run_config(&config, cli.seed)?;
            let hash = config_hash(&cfg);
            let data = load_data(&cfg)?;
            let outcome = train(
                &cfg.model,
                &cfg.train,
                &cfg.augment,
                &data.samples,
                &data.split,
                Some(&cli.out_dir),
                &hash,
            )?;
            finish_training(&cli.out_dir, &cfg, &data, &outcome, &hash)
        }
        Command::Eval {
            config,
            checkpoint,
            split,
        } => {
            let cfg = load_run_config(&config, cli.seed)?;
            let hash = config_hash(&cfg);
            let ckpt_path = checkpoint.unwrap_or_else(|| cli.out_dir.join("best.json"));
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let params = ckpt.restore_params()?;
            let state = ckpt.restore_memory()?;
            let manifest = load_manifest(&cfg.data.manifest_path())?;
            let samples = load_samples(
                &manifest,
                ckpt.model.input_size,
                cfg.data.cache_dir().as_deref(),
            )?;
            let split_set = split_indices(samples.len(), &cfg.data.split)?;
            let data = LoadedData {
                samples,
                split: split_set,
            };
            let indices = match split.as_str() {
                "train" => &data.split.train,
                "val" => &data.split.val,
                "test" => &data.split.test,
                other => {
                    return Err(Error::Config(format!(
                        "unknown split {other:?}; expected train, val, or test"
                    )))
                }
            };
            let (preds, targets) = predictions(
                &ckpt.model,
                &params,
                &state,
                &data.samples,
                indices,
                cfg.train.batch_size,
                &ckpt.label_scaler,
            )?;
            let report = crate::metrics::compute_metrics(
                &split,
                &preds,
                &targets,
                &hash,
                cfg.train.seed,
            )?;
            write_json(&cli.out_dir.join(format!("metrics_{split}.json")), &report)?;
            emit_scatter(&cli.out_dir, &targets, &preds)?;
            println!(
                "{split}: n={} mae={:.4} rmse={:.4} max={:.4} r2={}",
                report.n,
                report.mae,
                report.rmse,
                report.max_error,
                report
                    .r2
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "undefined".into())
            );
            Ok(())
        }
        Command::Ablate { config } => {
            let cfg = load_run_config(&config, cli.seed)?;
            let data = load_data(&cfg)?;
            let report = run_ablation(&cfg, cfg.train.seed, &data.samples, &data.split)?;
            report.save(&cli.out_dir.join("ablation.json"))?;
            println!(
                "prion mae={:.4} plain mae={:.4} delta={:+.4}",
                report.prion_vit.mae, report.plain_vit.mae, report.delta.mae
            );
            Ok(())
        }
        Command::Bench {
            config,
            runs,
            warmup,
            checkpoint,
        } => {
            let cfg = load_run_config(&config, cli.seed)?;
            let hash = config_hash(&cfg);
            let (params, state, label) = match checkpoint {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    (
                        ckpt.restore_params()?,
                        ckpt.restore_memory()?,
                        "checkpoint".to_string(),
                    )
                }
                None => {
                    let mut rng = Rng::from_seed(cfg.train.seed).derive(&[0x696e_6974]);
                    (
                        ModelParams::init(&cfg.model, &mut rng)?,
                        MemoryState::zeros(&cfg.model),
                        variant_label(&cfg.model),
                    )
                }
            };
            let mut clock = MonotonicClock::new();
            let report = bench_inference(
                &cfg.model,
                &params,
                &state,
                runs,
                warmup,
                &mut clock,
                &label,
                &hash,
                cfg.train.seed,
            )?;
            write_json(&cli.out_dir.join("bench.json"), &report)?;
            println!(
                "{label}: mean latency {:.6} s over {} runs (warmup {}), peak memory {}",
                report.mean_latency_s,
                report.n_runs,
                report.warmup,
                report
                    .peak_memory_mb
                    .map(|v| format!("{v:.1} MB"))
                    .unwrap_or_else(|| "unavailable".into())
            );
            Ok(())
        }
        Command::Gradcheck {
            config,
            batch,
            max_coords,
        } => {
            let cfg = load_run_config(&config, cli.seed)?;
            let settings = GradCheckSettings {
                max_coords,
                seed: cfg.train.seed,
                ..GradCheckSettings::default()
            };
            let mut worst: f64 = 0.0;
            for mode in [MemoryMode::PerSample, MemoryMode::Literal] {
                let mut model_cfg = cfg.model.clone();
                model_cfg.memory_enabled = true;
                model_cfg.memory_mode = mode;
                let report = model_grad_check(&model_cfg, batch, &settings, cfg.train.seed)?;
                println!(
                    "{mode:?}: max rel err {:.3e} over {} coords ({} non-smooth skipped)",
                    report.max_rel_err,
                    report.coords_checked(),
                    report.coords_nonsmooth()
                );
                for p in report.failing() {
                    println!(
                        "  FAIL {}: rel {:.3e} (analytic {:.6e}, numeric {:.6e})",
                        p.name, p.max_rel_err, p.worst_pair.0, p.worst_pair.1
                    );
                }
                worst = worst.max(report.max_rel_err);
                if !report.passed() {
                    return Err(Error::Other(format!(
                        "gradient check failed in {mode:?} mode: max rel err {:.3e} >= {:.1e}",
                        report.max_rel_err, report.tolerance
                    )));
                }
            }
            println!("gradcheck passed: max rel err {worst:.3e} across both memory modes");
            Ok(())
        }
        Command::Plot { input } => {
            let input = input.unwrap_or_else(|| cli.out_dir.join("scatter.csv"));
            let (targets, preds) = read_scatter_csv(&input)?;
            let svg = scatter_svg(&targets, &preds)?;
            let out = cli.out_dir.join("scatter.svg");
            std::fs::write(&out, svg)
                .map_err(|e| Error::io(format!("write {}", out.display()), e))?;
            println!("wrote {} ({} points)", out.display(), targets.len());
            Ok(())
        }
    }
}

fn variant_label(model: &PrionViTConfig) -> String {
    if model.memory_enabled {
        "prion-vit".to_string()
    } else {
        "plain-vit".to_string()
    }
}

fn finish_training(
    out_dir: &Path,
    cfg: &ExperimentConfig,
    data: &LoadedData,
    outcome: &TrainOutcome,
    hash: &str,
) -> Result<()> {
    outcome.history.write_csv(&out_dir.join("history.csv"))?;
    let val = evaluate(
        &cfg.model,
        &outcome.params,
        &outcome.memory,
        &data.samples,
        &data.split.val,
        cfg.train.batch_size,
        &outcome.scaler,
        "val",
        hash,
        cfg.train.seed,
    )?;
    write_json(&out_dir.join("metrics_val.json"), &val)?;
    println!(
        "best epoch {} val mae {:.4}; checkpoints and history under {}",
        outcome.best_epoch,
        outcome.best_val_mae,
        out_dir.display()
    );
    Ok(())
}
