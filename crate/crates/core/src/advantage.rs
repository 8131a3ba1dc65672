//! Group-relative advantages.
//!
//! Rewards are normalized within the group by their mean and population
//! standard deviation. With an injected label the statistics run over the
//! union of the `G` rollout rewards and the label reward. A group whose
//! standard deviation is below [`DEGENERATE_STD`] carries no signal and gets
//! all-zero advantages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub a_rollouts: Vec<f64>,
    pub a_label: Option<f64>,
    pub degenerate: bool,
}

impl AdvantageSet {
    /// Rollout advantages followed by the label advantage, if any.
    pub fn values(&self) -> Vec<f64> {
        self.a_rollouts.iter().copied().chain(self.a_label).collect()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_std(xs: &[f64], m: f64) -> f64 {
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn check_group(rewards: &[f64]) -> Result<()> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!("group size must be >= 2, got {}", rewards.len())));
    }
    if let Some(x) = rewards.iter().find(|x| !x.is_finite()) {
        return Err(Error::Config(format!("non-finite reward {x}")));
    }
    Ok(())
}

/// Standard group advantages over `G` rollout rewards.
pub fn advantage_grpo(rewards: &[f64]) -> Result<AdvantageSet> {
    check_group(rewards)?;
    let m = mean(rewards);
    let s = population_std(rewards, m);
    if s < DEGENERATE_STD {
        return Ok(AdvantageSet {
            a_rollouts: vec![0.0; rewards.len()],
            a_label: None,
            degenerate: true,
        });
    }
    Ok(AdvantageSet {
        a_rollouts: rewards.iter().map(|r| (r - m) / s).collect(),
        a_label: None,
        degenerate: false,
    })
}

/// Advantages over the rollouts plus the injected label reward `r_y`.
///
/// The union mean is formed as `mean(rollouts) + (r_y - mean(rollouts)) / (G+1)`,
/// which is algebraically the plain mean of all `G+1` values and makes the
/// label advantage exactly zero whenever `r_y` equals the rollout mean.
pub fn advantage_augmented(rollout_rewards: &[f64], r_y: f64) -> Result<AdvantageSet> {
    check_group(rollout_rewards)?;
    if !r_y.is_finite() {
        return Err(Error::Config(format!("non-finite label reward {r_y}")));
    }
    let g = rollout_rewards.len();
    let m_rollouts = mean(rollout_rewards);
    let m = m_rollouts + (r_y - m_rollouts) / (g + 1) as f64;
    let mut union = rollout_rewards.to_vec();
    union.push(r_y);
    let s = population_std(&union, m);
    if s < DEGENERATE_STD {
        return Ok(AdvantageSet {
            a_rollouts: vec![0.0; g],
            a_label: Some(0.0),
            degenerate: true,
        });
    }
    Ok(AdvantageSet {
        a_rollouts: rollout_rewards.iter().map(|r| (r - m) / s).collect(),
        a_label: Some((r_y - m) / s),
        degenerate: false,
    })
}
