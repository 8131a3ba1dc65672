use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::RewardConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Negative log-likelihood of the labels.
    Sft,
    /// Group-relative clipped policy optimization on self-generated rollouts.
    Rlvr,
    /// `stage_split` SFT steps, then RLVR.
    SftThenRlvr,
    /// RLVR with the ground-truth label injected as an extra group member.
    Visurf,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [Paradigm::Sft, Paradigm::Rlvr, Paradigm::SftThenRlvr, Paradigm::Visurf];

    pub fn as_str(&self) -> &'static str {
        match self {
            Paradigm::Sft => "sft",
            Paradigm::Rlvr => "rlvr",
            Paradigm::SftThenRlvr => "sft_then_rlvr",
            Paradigm::Visurf => "visurf",
        }
    }
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown paradigm `{s}`")))
    }
}

/// How training batches are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSampling {
    /// Distinct instances drawn uniformly from the training split.
    #[default]
    Uniform,
    /// Each batch holds `round(batch_size * p)` non-object instances, `p`
    /// being their share of the training split.
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paradigm: Paradigm,
    pub group_size: usize,
    pub epsilon_clip: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub inner_updates: usize,
    pub reward: RewardConfig,
    pub seed: u64,
    /// SFT steps before switching to RLVR; `None` means half of `steps`.
    pub stage_split: Option<usize>,
    pub batch_sampling: BatchSampling,
    /// Sequences drawn per context when measuring entropy each step.
    pub entropy_samples: usize,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::Visurf,
            group_size: 8,
            epsilon_clip: 0.2,
            lr: 0.05,
            steps: 500,
            batch_size: 16,
            inner_updates: 1,
            reward: RewardConfig::default(),
            seed: 0,
            stage_split: None,
            batch_sampling: BatchSampling::Uniform,
            entropy_samples: 4,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl RunConfig {
    pub fn split_step(&self) -> usize {
        self.stage_split.unwrap_or(self.steps / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epsilon_clip > 0.0) {
            return bad(format!("epsilon_clip must be > 0, got {}", self.epsilon_clip));
        }
        if self.inner_updates < 1 {
            return bad("inner_updates must be >= 1".into());
        }
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.entropy_samples < 1 {
            return bad("entropy_samples must be >= 1".into());
        }
        if self.paradigm == Paradigm::SftThenRlvr && self.steps > 0 && self.split_step() >= self.steps {
            return bad(format!(
                "stage_split {} must be < steps {}",
                self.split_step(),
                self.steps
            ));
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be >= 1".into());
        }
        self.reward.validate()
    }
}

/// Which update rule produced a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sft,
    Rlvr,
    Visurf,
}

/// Per-step telemetry. Rollout-related fields are `None` for SFT steps.
///
/// `entropy` is measured on the policy after the step's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub mean_rollout_reward: Option<f64>,
    pub label_reward: Option<f64>,
    pub a_label_mean: Option<f64>,
    pub entropy: f64,
    pub grad_norm: f64,
    pub smoothed_fraction: Option<f64>,
    pub degenerate_fraction: Option<f64>,
    pub labels_used: usize,
    pub rollouts_used: usize,
}
