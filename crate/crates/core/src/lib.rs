//! Weight-sharing architecture search over small recurrent cells, the
//! sentence-pair models that consume them, and the trial-based tuning
//! machinery used to evaluate candidates.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, a per-forward autodiff tape, and Adam
//!   with decoupled weight decay.
//! - [`cell`]: the searched recurrent-cell genotype, its shared parameter
//!   bank, and interpreted/compiled execution.
//! - [`controller`]: the recurrent policy that samples cell genotypes and
//!   learns from scored rewards.
//! - [`data`]: sentence-pair datasets, embedding providers, and metrics.
//! - [`models`]: the two sentence-pair encoders (max-pooled BiRNN and the
//!   cross-attention variant) built on interchangeable recurrent cells.
//! - [`nas`]: the alternating search loop (shared weights / policy updates)
//!   and fixed-architecture training.
//! - [`hpt`]: search spaces, a density-ratio suggester, and the concurrent,
//!   resumable study runner.
//!
//! [`gradcheck`] and [`testutil`] back the test suites with finite-difference
//! and statistical oracles.

pub mod cell;
pub mod controller;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hpt;
pub mod models;
pub mod nas;
pub mod tensor;
pub mod testutil;

pub use error::{Error, Result};
