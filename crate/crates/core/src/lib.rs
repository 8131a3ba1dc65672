//! A small laboratory for comparing post-training recipes on tabular
//! autoregressive policies and synthetic tasks with verifiable answers.
//!
//! Four paradigms are implemented: supervised fine-tuning (SFT), group-relative
//! RL with verifiable rewards (RLVR), SFT followed by RLVR, and RLVR with the
//! ground-truth label injected into every rollout group ("visurf"), together
//! with the reward controls that make label injection stable.
//!
//! Modules, bottom up:
//!
//! * [`policy`]: the tabular policy, exact log-probabilities and gradients,
//!   sampling and checkpoints.
//! * [`tasks`]: dataset generation, label serialization and answer decoding.
//! * [`reward`] and [`advantage`]: rewards, label controls and group
//!   normalization.
//! * [`trainer`]: per-step updates for every paradigm and the training loop.
//! * [`verify`]: finite-difference and brute-force oracles.
//! * [`harness`]: multi-seed experiments, comparison reports and plots.
//!
//! The `examples/` directory has one runnable program per capability.

pub mod advantage;
pub mod error;
pub mod harness;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod tasks;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use policy::{FormatPrior, TabularPolicy, TokenSequence, Vocab};
pub use tasks::{Dataset, TaskInstance};
pub use trainer::{Paradigm, RunConfig};
