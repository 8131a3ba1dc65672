//! Verifiable rewards and the label reward controls.
//!
//! A rollout earns `w_fmt * format + w_acc * accuracy`. The injected
//! ground-truth label is scored the same way, then adjusted by the controls:
//! `eliminate` zeroes its think-format component and `smooth` replaces its
//! reward with the rollout mean whenever some rollout already scores at least
//! as high. (`align` is applied earlier, when the label is serialized.)

use serde::{Deserialize, Serialize};

use crate::advantage::mean;
use crate::error::{Error, Result};
use crate::policy::{TokenSequence, Vocab};
use crate::tasks::{decode_answer, ItemSet, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardControls {
    pub align: bool,
    pub eliminate: bool,
    pub smooth: bool,
}

impl Default for RewardControls {
    fn default() -> Self {
        Self {
            align: true,
            eliminate: true,
            smooth: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub w_fmt: f64,
    pub w_acc: f64,
    pub controls: RewardControls,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_fmt: 0.1,
            w_acc: 0.9,
            controls: RewardControls::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_fmt < 0.0 || self.w_acc < 0.0 || (self.w_fmt + self.w_acc - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "reward weights must be nonnegative and sum to 1 (w_fmt = {}, w_acc = {})",
                self.w_fmt, self.w_acc
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_component: f64,
    pub accuracy_component: f64,
    pub total: f64,
    pub is_label: bool,
    pub smoothed: bool,
}

/// 1 iff the sequence is well-formed and carries a think block.
pub fn format_reward(seq: &TokenSequence, vocab: &Vocab) -> f64 {
    if decode_answer(seq, vocab).has_think {
        1.0
    } else {
        0.0
    }
}

/// Set IoU between the predicted and true items; an empty truth is matched
/// only by an empty prediction.
pub fn accuracy_reward(seq: &TokenSequence, gt_items: &ItemSet, vocab: &Vocab) -> f64 {
    match decode_answer(seq, vocab).predicted {
        None => 0.0,
        Some(pred) => set_iou(&pred, gt_items),
    }
}

pub fn set_iou(pred: &ItemSet, gt: &ItemSet) -> f64 {
    if gt.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    let inter = pred.intersection(gt).count();
    let union = pred.union(gt).count();
    inter as f64 / union as f64
}

pub fn score_rollouts(rollouts: &[TokenSequence], task: &TaskInstance, cfg: &RewardConfig, vocab: &Vocab) -> Vec<RewardBreakdown> {
    rollouts
        .iter()
        .map(|o| {
            let f = format_reward(o, vocab);
            let a = accuracy_reward(o, &task.gt_items, vocab);
            RewardBreakdown {
                format_component: f,
                accuracy_component: a,
                total: cfg.w_fmt * f + cfg.w_acc * a,
                is_label: false,
                smoothed: false,
            }
        })
        .collect()
}

/// Reward of the injected label after the eliminate and smooth controls.
pub fn score_label(
    label: &TokenSequence,
    task: &TaskInstance,
    rollout_rewards: &[f64],
    cfg: &RewardConfig,
    vocab: &Vocab,
) -> Result<RewardBreakdown> {
    let decoded = decode_answer(label, vocab);
    if decoded.predicted.as_ref() != Some(&task.gt_items) {
        return Err(Error::Integrity(format!(
            "label `{}` does not decode to the ground truth of task {}",
            vocab.render(label.ids()),
            task.id
        )));
    }
    let format_component = if cfg.controls.eliminate {
        0.0
    } else {
        format_reward(label, vocab)
    };
    let accuracy_component = set_iou(decoded.predicted.as_ref().expect("checked above"), &task.gt_items);
    let provisional = cfg.w_fmt * format_component + cfg.w_acc * accuracy_component;
    let mut out = RewardBreakdown {
        format_component,
        accuracy_component,
        total: provisional,
        is_label: true,
        smoothed: false,
    };
    if cfg.controls.smooth && !rollout_rewards.is_empty() {
        let best = rollout_rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best >= provisional {
            out.total = mean(rollout_rewards);
            out.smoothed = true;
        }
    }
    Ok(out)
}
