//! Release gate: one test per acceptance criterion, each printing a
//! PASS/FAIL line so `--nocapture` gives a one-screen summary.
//!
//! Run with `cargo test --test acceptance -- --nocapture`. The ablation
//! criterion trains six desk-scale models and dominates the runtime;
//! everything else finishes in seconds.

use std::panic::{catch_unwind, resume_unwind};
use std::path::Path;
use std::time::Instant;

use prion_vit::model::{
    bind_params, compute_gate, forward, prion_layer_step, update_memory, ForwardMode, MemoryMode,
    MemoryState, ModelParams, PrionViTConfig,
};
use prion_vit::rng::Rng;
use prion_vit::tensor::Tensor;

fn criterion(name: &str, body: impl FnOnce() + std::panic::UnwindSafe) {
    match catch_unwind(body) {
        Ok(()) => println!("PASS {name}"),
        Err(e) => {
            println!("FAIL {name}");
            resume_unwind(e);
        }
    }
}

fn tiny_config() -> PrionViTConfig {
    PrionViTConfig {
        input_size: 32,
        patch_size: 16,
        embed_dim: 8,
        num_blocks: 2,
        num_heads: 2,
        ffn_dim: 16,
        head_hidden: 8,
        dropout_rate: 0.0,
        ..PrionViTConfig::default()
    }
}

// ── 1: gradient correctness ──────────────────────────────────────────────

#[test]
fn gradients_match_finite_differences_in_both_memory_modes() {
    criterion("gradient check, both memory modes, tiny config, under 60 s", || {
        use prion_vit::gradcheck::GradCheckSettings;
        let started = Instant::now();
        let settings = GradCheckSettings::default();
        for mode in [MemoryMode::PerSample, MemoryMode::Literal] {
            let mut cfg = tiny_config();
            cfg.memory_enabled = true;
            cfg.memory_mode = mode;
            let report = prion_vit::model::model_grad_check(&cfg, 2, &settings, 0).unwrap();
            let all_params = ModelParams::init(&cfg, &mut Rng::from_seed(0)).unwrap();
            let expect: Vec<&String> = all_params.entries().iter().map(|(n, _)| n).collect();
            let got: Vec<&String> = report.params.iter().map(|p| &p.name).collect();
            assert_eq!(got, expect, "{mode:?}: not every parameter was checked");
            for p in &report.params {
                assert!(
                    p.max_rel_err < settings.tolerance,
                    "{mode:?} {}: rel err {:.3e}",
                    p.name,
                    p.max_rel_err
                );
                assert!(p.coords_checked > 0, "{mode:?} {} never checked", p.name);
            }
            for gate_param in ["gate.wg", "gate.bg"] {
                assert!(
                    report.params.iter().any(|p| p.name == gate_param),
                    "{gate_param} missing from report"
                );
            }
            assert!(report.passed());
        }
        let elapsed = started.elapsed().as_secs_f64();
        assert!(elapsed < 60.0, "gradient check took {elapsed:.1} s");
    });
}

// ── 2: memory update unit suite ──────────────────────────────────────────

#[test]
fn memory_equations_hold_on_random_and_limit_inputs() {
    criterion("gate range, memory limits, convex bound, literal collapse", || {
        use prion_vit::autodiff::Tape;
        let mut rng = Rng::from_seed(42);

        // gate outputs strictly inside (0,1) on 1e4 random inputs
        let (b, n, d) = (10, 125, 8);
        assert_eq!(b * n * d, 10_000);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[b, n, d], |_| rng.normal(0.0, 1.0)));
        let wg = tape.constant(Tensor::from_fn(&[d, d], |_| rng.normal(0.0, 1.0)));
        let bg = tape.constant(Tensor::from_fn(&[d], |_| rng.normal(0.0, 1.0)));
        let g = compute_gate(&mut tape, x, wg, bg).unwrap();
        for &v in tape.value(g).data() {
            assert!(v > 0.0 && v < 1.0, "gate value {v} outside (0,1)");
        }

        // saturated-gate limits, exact to 1e-12
        let (b, n, d) = (3, 4, 5);
        let m_t = Tensor::from_fn(&[n, d], |_| rng.normal(0.0, 1.0));
        let x_t = Tensor::from_fn(&[b, n, d], |_| rng.normal(0.0, 1.0));
        let mut tape = Tape::new();
        let m = tape.constant(m_t.clone());
        let x = tape.constant(x_t.clone());
        let ones = tape.constant(Tensor::from_fn(&[b, n, d], |_| 1.0));
        let (_, kept) = update_memory(&mut tape, m, x, ones).unwrap();
        for (out, expect) in tape.value(kept).data().iter().zip(m_t.data()) {
            assert!((out - expect).abs() <= 1e-12);
        }
        let mut tape = Tape::new();
        let m = tape.constant(m_t.clone());
        let x = tape.constant(x_t.clone());
        let zeros = tape.constant(Tensor::zeros(&[b, n, d]));
        let (_, replaced) = update_memory(&mut tape, m, x, zeros).unwrap();
        for i in 0..n * d {
            let mean: f64 = (0..b).map(|bi| x_t.data()[bi * n * d + i]).sum::<f64>() / b as f64;
            assert!((tape.value(replaced).data()[i] - mean).abs() <= 1e-12);
        }

        // convex-combination bound on 1e3 random triples
        for _ in 0..1_000 {
            let lo = rng.normal(0.0, 2.0);
            let hi = lo + rng.uniform() + 1e-3;
            let mut tape = Tape::new();
            let m = tape.constant(Tensor::from_fn(&[n, d], |_| lo + (hi - lo) * rng.uniform()));
            let x =
                tape.constant(Tensor::from_fn(&[b, n, d], |_| lo + (hi - lo) * rng.uniform()));
            let g = tape.constant(Tensor::from_fn(&[b, n, d], |_| rng.uniform()));
            let (cand, agg) = update_memory(&mut tape, m, x, g).unwrap();
            for &v in tape.value(cand).data().iter().chain(tape.value(agg).data()) {
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
            }
        }

        // literal-mode collapse: all rows bitwise identical
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, &mut Rng::from_seed(5)).unwrap();
        for batch in [2usize, 4, 8] {
            let (n, d) = (cfg.num_tokens(), cfg.embed_dim);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_fn(&[batch, n, d], |_| rng.normal(0.0, 1.0)));
            let m = tape.constant(Tensor::from_fn(&[n, d], |_| rng.normal(0.0, 1.0)));
            let bound = bind_params(&mut tape, &params, false);
            let (x_next, _) =
                prion_layer_step(&mut tape, x, m, &bound, MemoryMode::Literal).unwrap();
            let data = tape.value(x_next).data();
            let row = &data[..n * d];
            for bi in 1..batch {
                for (a, b) in row.iter().zip(&data[bi * n * d..(bi + 1) * n * d]) {
                    assert_eq!(a.to_bits(), b.to_bits(), "literal rows diverge at B={batch}");
                }
            }
        }
    });
}

// ── 3: plain-ViT equivalence ─────────────────────────────────────────────

/// Straight-line reference implementation of the plain ViT forward pass,
/// written against flat `Vec<f64>` buffers with the same accumulation
/// orders as the tape kernels, so agreement must be bit-for-bit.
mod reference {
    use super::*;

    pub struct Dims {
        pub n: usize,
        pub d: usize,
        pub heads: usize,
        pub dh: usize,
        pub ffn: usize,
        pub hh: usize,
    }

    fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let ap = a[i * k + p];
                for j in 0..n {
                    out[i * n + j] += ap * b[p * n + j];
                }
            }
        }
        out
    }

    fn add_bias(x: &mut [f64], bias: &[f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v += bias[i % bias.len()];
        }
    }

    fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], d: usize) -> Vec<f64> {
        let eps = 1e-5;
        let mut out = Vec::with_capacity(x.len());
        for lane in x.chunks(d) {
            let mean = lane.iter().sum::<f64>() / d as f64;
            let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (j, &v) in lane.iter().enumerate() {
                out.push((v - mean) * inv_std * gamma[j] + beta[j]);
            }
        }
        out
    }

    fn attention(x: &[f64], params: &ModelParams, block: usize, dims: &Dims) -> Vec<f64> {
        let (n, d, heads, dh) = (dims.n, dims.d, dims.heads, dims.dh);
        let pre = format!("block{block}.attn");
        let project = |which: &str| -> Vec<f64> {
            let mut p = matmul(x, params.get(&format!("{pre}.w{which}")).data(), n, d, d);
            add_bias(&mut p, params.get(&format!("{pre}.b{which}")).data());
            // [N,D] -> [H,N,dh]
            let mut split = vec![0.0; n * d];
            for t in 0..n {
                for h in 0..heads {
                    for c in 0..dh {
                        split[(h * n + t) * dh + c] = p[t * d + h * dh + c];
                    }
                }
            }
            split
        };
        let q = project("q");
        let k = project("k");
        let v = project("v");

        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = vec![0.0; heads * n * dh];
        for h in 0..heads {
            let qh = &q[h * n * dh..(h + 1) * n * dh];
            let kh = &k[h * n * dh..(h + 1) * n * dh];
            let vh = &v[h * n * dh..(h + 1) * n * dh];
            let mut scores = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += qh[i * dh + c] * kh[j * dh + c];
                    }
                    scores[i * n + j] = s * scale;
                }
            }
            for i in 0..n {
                let lane = &mut scores[i * n..(i + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for &s in lane.iter() {
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in lane.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in lane.iter_mut() {
                    *s /= sum;
                }
            }
            let ctx_h = matmul(&scores, vh, n, n, dh);
            ctx[h * n * dh..(h + 1) * n * dh].copy_from_slice(&ctx_h);
        }

        // [H,N,dh] -> [N,D]
        let mut merged = vec![0.0; n * d];
        for t in 0..n {
            for h in 0..heads {
                for c in 0..dh {
                    merged[t * d + h * dh + c] = ctx[(h * n + t) * dh + c];
                }
            }
        }
        let mut out = matmul(&merged, params.get(&format!("{pre}.wo")).data(), n, d, d);
        add_bias(&mut out, params.get(&format!("{pre}.bo")).data());
        out
    }

    /// Plain ViT forward for a single `[3,S,S]` image, no memory, no
    /// dropout. Returns the scalar prediction.
    pub fn plain_vit_forward(
        image: &[f64],
        params: &ModelParams,
        config: &PrionViTConfig,
    ) -> f64 {
        let dims = Dims {
            n: config.num_tokens(),
            d: config.embed_dim,
            heads: config.num_heads,
            dh: config.head_dim(),
            ffn: config.ffn_dim,
            hh: config.head_hidden,
        };
        let (n, d) = (dims.n, dims.d);
        let side = config.input_size / config.patch_size;
        let ps = config.patch_size;
        let s = config.input_size;
        let patch_dim = config.patch_dim();

        // patchify: token (pr, pc), feature (c, dr, dc)
        let mut flat = vec![0.0; n * patch_dim];
        for pr in 0..side {
            for pc in 0..side {
                let t = pr * side + pc;
                for c in 0..3 {
                    for dr in 0..ps {
                        for dc in 0..ps {
                            let f = (c * ps + dr) * ps + dc;
                            flat[t * patch_dim + f] =
                                image[(c * s + pr * ps + dr) * s + pc * ps + dc];
                        }
                    }
                }
            }
        }
        let mut x = matmul(&flat, params.get("patch.weight").data(), n, patch_dim, d);
        add_bias(&mut x, params.get("patch.bias").data());
        add_bias(&mut x, params.get("pos_embed").data());

        for block in 0..config.num_blocks {
            let pre = format!("block{block}");
            let ln1 = layer_norm(
                &x,
                params.get(&format!("{pre}.ln1.gamma")).data(),
                params.get(&format!("{pre}.ln1.beta")).data(),
                d,
            );
            let attended = attention(&ln1, params, block, &dims);
            for (xi, ai) in x.iter_mut().zip(&attended) {
                *xi += ai;
            }
            let ln2 = layer_norm(
                &x,
                params.get(&format!("{pre}.ln2.gamma")).data(),
                params.get(&format!("{pre}.ln2.beta")).data(),
                d,
            );
            let mut h = matmul(&ln2, params.get(&format!("{pre}.ffn.w1")).data(), n, d, dims.ffn);
            add_bias(&mut h, params.get(&format!("{pre}.ffn.b1")).data());
            for v in h.iter_mut() {
                if !(*v > 0.0) {
                    *v = 0.0;
                }
            }
            let mut out = matmul(&h, params.get(&format!("{pre}.ffn.w2")).data(), n, dims.ffn, d);
            add_bias(&mut out, params.get(&format!("{pre}.ffn.b2")).data());
            for (xi, oi) in x.iter_mut().zip(&out) {
                *xi += oi;
            }
        }

        // head: token mean pool, dense + relu, dense to 1
        let mut pooled = vec![0.0; d];
        for t in 0..n {
            for j in 0..d {
                pooled[j] += x[t * d + j];
            }
        }
        let inv = 1.0 / n as f64;
        for p in pooled.iter_mut() {
            *p *= inv;
        }
        let mut h = matmul(&pooled, params.get("head.w1").data(), 1, d, dims.hh);
        add_bias(&mut h, params.get("head.b1").data());
        for v in h.iter_mut() {
            if !(*v > 0.0) {
                *v = 0.0;
            }
        }
        let mut y = matmul(&h, params.get("head.w2").data(), 1, dims.hh, 1);
        add_bias(&mut y, params.get("head.b2").data());
        y[0]
    }
}

#[test]
fn plain_vit_matches_the_reference_path_bitwise() {
    criterion("plain ViT forward equals reference bit-for-bit, 100 inputs", || {
        let mut cfg = tiny_config();
        cfg.memory_enabled = false;
        cfg.dropout_rate = 0.5;
        let params = ModelParams::init(&cfg, &mut Rng::from_seed(11)).unwrap();
        let mut state = MemoryState::zeros(&cfg);
        let mut rng = Rng::from_seed(12);
        for trial in 0..100 {
            let image = Tensor::from_fn(&[1, 3, cfg.input_size, cfg.input_size], |_| {
                rng.normal(0.0, 1.0)
            });
            let got = forward(&cfg, &params, &mut state, &image, ForwardMode::Eval).unwrap();
            let expect = reference::plain_vit_forward(image.data(), &params, &cfg);
            assert_eq!(
                got.data()[0].to_bits(),
                expect.to_bits(),
                "trial {trial}: {} vs {}",
                got.data()[0],
                expect
            );
        }
    });
}

// ── 4: determinism ───────────────────────────────────────────────────────

fn desk_dataset(
    dir: &Path,
    fiber_seed: u64,
    modes: usize,
    t_max: f64,
    step: f64,
    size: usize,
) -> Vec<prion_vit::pipeline::Sample> {
    use prion_vit::speckle::{generate_dataset, FiberModeSet};
    let fiber = FiberModeSet::new(fiber_seed, modes).unwrap();
    let manifest = generate_dataset(&fiber, 0.0, t_max, step, size, dir).unwrap();
    prion_vit::pipeline::load_samples(&manifest, size, None).unwrap()
}

#[test]
fn identical_runs_are_bitwise_identical() {
    criterion("identical seed and config give bitwise-identical training", || {
        use prion_vit::pipeline::{split_indices, AugmentConfig, SplitSpec};
        use prion_vit::train::{evaluate, train, TrainConfig};
        let tmp = tempfile::tempdir().unwrap();
        let samples = desk_dataset(&tmp.path().join("data"), 7, 12, 40.0, 1.0, 32);
        let split = split_indices(samples.len(), &SplitSpec::default()).unwrap();
        let cfg = tiny_config();
        let train_cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            learning_rate: 3e-3,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let augment_cfg = AugmentConfig::default();
        let run = || {
            let outcome =
                train(&cfg, &train_cfg, &augment_cfg, &samples, &split, None, "h").unwrap();
            let metrics = evaluate(
                &cfg,
                &outcome.params,
                &outcome.memory,
                &samples,
                &split.test,
                train_cfg.batch_size,
                &outcome.scaler,
                "test",
                "h",
                train_cfg.seed,
            )
            .unwrap();
            (outcome, metrics)
        };
        let (out_a, metrics_a) = run();
        let (out_b, metrics_b) = run();
        let hist_a = serde_json::to_string(&out_a.history.without_wall_times()).unwrap();
        let hist_b = serde_json::to_string(&out_b.history.without_wall_times()).unwrap();
        assert_eq!(hist_a, hist_b, "histories diverge");
        assert_eq!(metrics_a, metrics_b, "final metrics diverge");
        for ((name, ta), (_, tb)) in out_a.params.entries().iter().zip(out_b.params.entries()) {
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} diverges");
            }
        }
    });
}

// ── 6: dataset and pipeline exactness ────────────────────────────────────

#[test]
fn dataset_grid_split_and_sobel_are_exact() {
    criterion("601-row grid, 420/120/61 split, Sobel equals brute force", || {
        use prion_vit::pipeline::{sobel, split_indices, SplitSpec};
        use prion_vit::speckle::{generate_dataset, FiberModeSet};
        let tmp = tempfile::tempdir().unwrap();
        let fiber = FiberModeSet::new(3, 6).unwrap();
        let manifest =
            generate_dataset(&fiber, 0.0, 120.0, 0.2, 16, &tmp.path().join("data")).unwrap();
        assert_eq!(manifest.entries.len(), 601);

        let split = split_indices(601, &SplitSpec::default()).unwrap();
        assert_eq!(split.train.len(), 420);
        assert_eq!(split.test.len(), 120);
        assert_eq!(split.val.len(), 61);
        let mut all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.test)
            .chain(&split.val)
            .copied()
            .collect();
        all.sort_unstable();
        let covering: Vec<usize> = (0..601).collect();
        assert_eq!(all, covering, "split indices are not a disjoint covering");

        // vertical step edge
        let size = 12;
        let image: Vec<f64> = (0..size * size)
            .map(|i| if i % size < size / 2 { 0.0 } else { 1.0 })
            .collect();
        let (gx, gy, mag) = sobel(&image, size, size).unwrap();
        let (ox, oy, omag) = brute_force_sobel(&image, size);
        assert_eq!(gx, ox, "gx differs from brute force");
        assert_eq!(gy, oy, "gy differs from brute force");
        assert_eq!(mag, omag, "magnitude differs from brute force");
    });
}

/// Direct convolution with the two 3x3 Sobel kernels, reflect-padded,
/// magnitude sqrt(gx^2 + gy^2).
fn brute_force_sobel(image: &[f64], size: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let kx: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let reflect = |i: isize| -> usize {
        let len = size as isize;
        let mut i = if i < 0 { -i } else { i };
        if i >= len {
            i = 2 * len - 2 - i;
        }
        i as usize
    };
    let at = |r: isize, c: isize| image[reflect(r) * size + reflect(c)];
    let mut gx = vec![0.0; size * size];
    let mut gy = vec![0.0; size * size];
    let mut mag = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let (ri, ci) = (r as isize, c as isize);
            let mut sx = 0.0;
            let mut sy = 0.0;
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let v = at(ri + dr, ci + dc);
                    sx += kx[(dr + 1) as usize][(dc + 1) as usize] * v;
                    sy += ky[(dr + 1) as usize][(dc + 1) as usize] * v;
                }
            }
            gx[r * size + c] = sx;
            gy[r * size + c] = sy;
            mag[r * size + c] = (sx * sx + sy * sy).sqrt();
        }
    }
    (gx, gy, mag)
}

// ── 7: metrics oracle ────────────────────────────────────────────────────

#[test]
fn metrics_match_the_hand_computed_oracle() {
    criterion("metrics oracle triple and RMSE^2 = MSE", || {
        use prion_vit::metrics::compute_metrics;
        let r = compute_metrics("test", &[2.0, 4.0, 6.0], &[1.0, 5.0, 6.0], "h", 0).unwrap();
        assert!((r.mae - 2.0 / 3.0).abs() < 1e-9);
        assert!((r.mse - 2.0 / 3.0).abs() < 1e-9);
        assert!((r.rmse - 0.816_496_580_927_726).abs() < 1e-9);
        assert!((r.max_error - 1.0).abs() < 1e-9);
        assert!((r.r2.unwrap() - 6.0 / 7.0).abs() < 1e-9);

        let mut rng = Rng::from_seed(8);
        for _ in 0..50 {
            let n = 1 + (rng.uniform() * 40.0) as usize;
            let preds: Vec<f64> = (0..n).map(|_| rng.normal(60.0, 30.0)).collect();
            let targets: Vec<f64> = (0..n).map(|_| rng.normal(60.0, 30.0)).collect();
            let r = compute_metrics("test", &preds, &targets, "h", 0).unwrap();
            assert!((r.rmse * r.rmse - r.mse).abs() < 1e-9, "RMSE^2 != MSE");
        }
    });
}

// ── 8: specklegram physics sanity ────────────────────────────────────────

#[test]
fn speckle_decorrelates_monotonically_with_temperature_distance() {
    criterion("zncc self-identity and decorrelation over dT", || {
        use prion_vit::speckle::{render_specklegram, zncc, FiberModeSet};
        let size = 24;
        let t0 = 30.0;
        let deltas = [0.2, 2.0, 20.0];
        let mut sums = [0.0; 3];
        for seed in 0..20 {
            let fiber = FiberModeSet::new(seed, 15).unwrap();
            let base = render_specklegram(&fiber, t0, size).unwrap();
            if seed == 0 {
                let self_corr = zncc(&base, &base).unwrap();
                assert!((self_corr - 1.0).abs() <= 1e-12, "zncc(I,I) = {self_corr}");
            }
            for (k, &dt) in deltas.iter().enumerate() {
                let shifted = render_specklegram(&fiber, t0 + dt, size).unwrap();
                sums[k] += zncc(&base, &shifted).unwrap();
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| s / 20.0).collect();
        assert!(
            means[0] >= means[1] && means[1] >= means[2],
            "zncc means not non-increasing: {means:?}"
        );
    });
}

// ── 9: report schema and warmup exclusion ────────────────────────────────

#[test]
fn reports_are_schema_valid_and_bench_excludes_warmup() {
    criterion("bench/ablation JSON schema, fake-clock warmup exclusion", || {
        use prion_vit::bench::{bench_inference, BenchReport, FakeClock};
        use prion_vit::config::ExperimentConfig;
        use prion_vit::pipeline::split_indices;
        use prion_vit::report::run_ablation;

        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, &mut Rng::from_seed(1)).unwrap();
        let state = MemoryState::zeros(&cfg);
        // Warmup lap 10 ms, then measured laps of 4 and 2 ms; the mean must
        // be 3 ms, which a leaked warmup would push to over 5 ms.
        let mut clock = FakeClock::from_millis(&[0, 10, 10, 14, 14, 16]);
        let report =
            bench_inference(&cfg, &params, &state, 2, 1, &mut clock, "tiny", "hash", 9).unwrap();
        assert!(
            (report.mean_latency_s - 0.003).abs() < 1e-12,
            "warmup leaked into the mean: {}",
            report.mean_latency_s
        );
        assert_eq!(report.n_runs, 2);
        assert_eq!(report.warmup, 1);

        let json = serde_json::to_string(&report).unwrap();
        let parsed: BenchReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.config_hash, "hash");
        assert_eq!(parsed.seed, 9);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
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
            assert!(value.get(key).is_some(), "bench.json missing {key}");
        }

        let tmp = tempfile::tempdir().unwrap();
        let samples = desk_dataset(&tmp.path().join("data"), 7, 10, 20.0, 1.0, 32);
        let split = split_indices(samples.len(), &Default::default()).unwrap();
        let mut exp = ExperimentConfig::default();
        exp.model = tiny_config();
        exp.train.epochs = 2;
        exp.train.batch_size = 8;
        exp.train.checkpoint_every = 0;
        exp.augment.enabled = false;
        let ablation = run_ablation(&exp, 3, &samples, &split).unwrap();
        let path = tmp.path().join("ablation.json");
        ablation.save(&path).unwrap();
        let value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for key in ["config_hash", "seed", "prion_vit", "plain_vit", "delta"] {
            assert!(value.get(key).is_some(), "ablation.json missing {key}");
        }
        assert_eq!(value["seed"].as_u64(), Some(3));
        assert_eq!(
            value["config_hash"].as_str().unwrap().len(),
            16,
            "config hash is not 16 hex chars"
        );
        for variant in ["prion_vit", "plain_vit"] {
            let m = &value[variant];
            let rmse = m["rmse"].as_f64().unwrap();
            let mse = m["mse"].as_f64().unwrap();
            assert!((rmse * rmse - mse).abs() < 1e-9, "{variant} RMSE^2 != MSE");
        }
    });
}

// ── 5: directional ablation ──────────────────────────────────────────────

#[test]
fn prion_memory_improves_desk_scale_regression() {
    criterion("desk-scale ablation: R2 >= 0.90 and MAE ordering over seeds", || {
        use prion_vit::config::ExperimentConfig;
        use prion_vit::pipeline::split_indices;
        use prion_vit::report::run_ablation;

        let started = Instant::now();
        let tmp = tempfile::tempdir().unwrap();
        let size = 64;
        let samples = desk_dataset(&tmp.path().join("data"), 7, 40, 120.0, 0.2, size);
        assert_eq!(samples.len(), 601);
        let split = split_indices(samples.len(), &Default::default()).unwrap();

        let mut exp = ExperimentConfig::default();
        exp.model = PrionViTConfig {
            input_size: size,
            patch_size: 16,
            embed_dim: 32,
            num_blocks: 4,
            num_heads: 4,
            ffn_dim: 64,
            head_hidden: 64,
            dropout_rate: 0.1,
            ..PrionViTConfig::default()
        };
        exp.train.epochs = 60;
        exp.train.batch_size = 16;
        exp.train.learning_rate = 1e-3;
        exp.train.checkpoint_every = 0;
        exp.augment.enabled = true;
        exp.augment.noise_sigma = 0.02;
        exp.augment.flip_horizontal = false;
        exp.augment.flip_vertical = false;
        exp.augment.brightness_delta = 0.0;
        exp.augment.rotation_deg = 0.0;

        let mut wins = 0;
        for seed in [0, 1, 2] {
            let report = run_ablation(&exp, seed, &samples, &split).unwrap();
            println!(
                "  seed {seed}: prion mae {:.3} r2 {:.4} | plain mae {:.3} r2 {:.4}",
                report.prion_vit.mae,
                report.prion_vit.r2.unwrap_or(f64::NAN),
                report.plain_vit.mae,
                report.plain_vit.r2.unwrap_or(f64::NAN),
            );
            assert!(
                report.prion_vit.r2.unwrap() >= 0.90,
                "seed {seed}: prion R2 {:?}",
                report.prion_vit.r2
            );
            assert!(
                report.plain_vit.r2.unwrap() >= 0.90,
                "seed {seed}: plain R2 {:?}",
                report.plain_vit.r2
            );
            if report.prion_vit.mae <= report.plain_vit.mae {
                wins += 1;
            }
        }
        assert!(wins >= 2, "prion beats plain on only {wins} of 3 seeds");
        let minutes = started.elapsed().as_secs_f64() / 60.0;
        assert!(minutes <= 45.0, "ablation took {minutes:.1} min");
    });
}
