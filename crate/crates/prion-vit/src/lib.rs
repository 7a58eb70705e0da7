//! Specklegram-to-temperature regression with a memory-augmented vision
//! transformer, built on a small f64 tensor library with tape-based
//! reverse-mode autodiff.
//!
//! The crate covers the full path from synthetic data to trained model:
//! fiber specklegram synthesis ([`speckle`]), image preprocessing and
//! augmentation ([`pipeline`]), the transformer with its prion-style shared
//! memory ([`model`]), Adam training with checkpointing ([`train`],
//! [`checkpoint`]), and a CLI ([`cli`]) that drives generation, training,
//! evaluation, ablation, and benchmarks.
//!
//! All randomness flows through seeded [`rng::Rng`] streams and all heavy
//! kernels accumulate in a fixed order, so every entry point is bitwise
//! reproducible for a given seed, with or without the `parallel` feature.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod rng;
pub mod speckle;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
