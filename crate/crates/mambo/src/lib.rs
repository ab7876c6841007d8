//! Few-shot out-of-distribution detection built around foreground-background
//! decomposition of patch features.
//!
//! The pipeline learns a class prompt and a background prompt against small
//! frozen encoders, refines per-patch background similarity with the class
//! similarity, extracts background patches with a confidence-calibrated
//! threshold, and regularizes those patches toward uniform class
//! probabilities. Detection scores (MCM, GL-MCM, R-MCM) and the FPR95/AUROC
//! metrics run on top of the same feature types.
//!
//! Everything is deterministic per seed and runs in f64, so gradients and
//! metrics can be checked against independent oracles.

pub mod bench;
pub mod bgdecomp;
pub mod cli;
pub mod config;
pub mod dump;
pub mod encoders;
pub mod error;
pub mod math;
pub mod scoring;
pub mod synth;
pub mod training;
pub mod types;
pub mod viz;

pub use error::{Error, Result};
