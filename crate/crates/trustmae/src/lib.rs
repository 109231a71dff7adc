//! TrustMAE: noise-resilient surface-defect detection built on a
//! memory-augmented auto-encoder with sparse memory addressing, trust-region
//! memory updates, and a spatial perceptual distance.
//!
//! The crate is organized bottom-up:
//!
//! - [`substrate`] — dense f64 tensors with reverse-mode autodiff
//! - [`memory`] — the memory bank and its addressing / update math
//! - [`model`] — configurable encoder / memory / decoder stack
//! - [`losses`] — L1, SSIM, margin and trust losses with weighted total
//! - [`perceptual`] — multi-scale perceptual distance and error maps
//! - [`data`] — synthetic defect datasets and MVTec-layout folder I/O
//! - [`training`] — Adam loop, loss logs, binary checkpoints
//! - [`eval`] — defect scores, ROC-AUC, sweeps, memory diagnostics
//! - [`config`] / [`cli`] — JSON run configuration and the CLI tool

pub mod substrate;

pub mod seeding;

pub mod memory;

pub mod model;

pub mod losses;

pub mod perceptual;

pub mod data;

pub mod training;

pub mod eval;

pub mod gradsuite;

pub mod config;

pub mod cli;
