//! Generative causal representation learning for trajectory forecasting.
//!
//! The model splits latent structure into environment-specific variant
//! features `s` (Gaussian-mixture prior, one flow-transformed component per
//! mixture slot) and invariant features `z` (single flow prior), trained
//! end-to-end with an importance-weighted variational objective over
//! observed/future trajectory pairs. The crate also ships the synthetic
//! circle-crossing benchmark, the velocity-derived observation-noise
//! channel, domain-adaptation routines that fine-tune a declared subset of
//! parameters, and the ADE/FDE/MCC evaluation harness.
//!
//! Entry points:
//! - [`runner`] — generate / train / adapt / eval drivers used by the CLI.
//! - [`model::GcrlModel`] — the network itself.
//! - [`objective`] — the training losses.
//! - [`numgrad`] — the f64 reverse-mode autodiff engine everything runs on.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod flows;
pub mod model;
pub mod numgrad;
pub mod objective;
pub mod oracles;
pub mod priors;
pub mod runner;
pub mod simdata;

pub use error::{GcrlError, Result};
