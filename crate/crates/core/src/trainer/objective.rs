//! Clipped group surrogate and its gradient.
//!
//! For one task the loss is
//! `-(1/N) * sum_i min(rho_i * A_i, clip(rho_i, 1-eps, 1+eps) * A_i)`
//! with `rho_i = pi(o_i) / pi_old(o_i)`. `N` is `G` for plain group
//! optimization and `G + 1` when the label is injected as an extra member.

use crate::error::Result;
use crate::policy::{ParamTable, TabularPolicy, TokenSequence};

/// One member of a scored group: a rollout or the injected label.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMember {
    pub seq: TokenSequence,
    pub advantage: f64,
    pub old_logprob: f64,
    pub is_label: bool,
}

/// Scored group for one task, ready for (possibly repeated) updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGroup {
    pub context: usize,
    pub members: Vec<GroupMember>,
    /// Normalizer `N` of the group sum.
    pub normalizer: usize,
}

/// `min(rho * A, clip(rho, 1-eps, 1+eps) * A)`.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`clipped_term`] with respect to the ratio: `A` where the
/// unclipped branch is selected, 0 in the dead zones.
pub fn clipped_term_slope(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let dead = (advantage > 0.0 && ratio > 1.0 + epsilon) || (advantage < 0.0 && ratio < 1.0 - epsilon);
    if dead {
        0.0
    } else {
        advantage
    }
}

/// Loss of one group under `policy`; adds `scale * d loss / d theta` into `grad`.
pub fn group_loss_and_grad(
    policy: &TabularPolicy,
    group: &ScoredGroup,
    epsilon: f64,
    scale: f64,
    grad: &mut ParamTable,
) -> Result<f64> {
    let n = group.normalizer as f64;
    let mut objective = 0.0;
    for m in &group.members {
        if m.advantage == 0.0 {
            continue;
        }
        let lp = policy.logprob(group.context, &m.seq)?;
        let ratio = (lp - m.old_logprob).exp();
        objective += clipped_term(ratio, m.advantage, epsilon);
        // d rho / d theta = rho * d logpi / d theta
        let coef = clipped_term_slope(ratio, m.advantage, epsilon) * ratio;
        policy.accumulate_grad_logprob(group.context, &m.seq, -scale * coef / n, grad)?;
    }
    Ok(-objective / n)
}

/// Mean loss over groups and the matching mean gradient.
///
/// Per-group gradients are computed independently and summed in group order,
/// so the result does not depend on scheduling.
pub fn batch_loss_and_grad(policy: &TabularPolicy, groups: &[ScoredGroup], epsilon: f64) -> Result<(f64, ParamTable)> {
    use rayon::prelude::*;
    let b = groups.len() as f64;
    let parts: Vec<Result<(f64, ParamTable)>> = groups
        .par_iter()
        .map(|g| {
            let mut t = ParamTable::zeros(policy.shape());
            let l = group_loss_and_grad(policy, g, epsilon, 1.0, &mut t)?;
            Ok((l, t))
        })
        .collect();
    let mut grad = ParamTable::zeros(policy.shape());
    let mut loss = 0.0;
    for p in parts {
        let (l, t) = p?;
        loss += l / b;
        grad.add_scaled(&t, 1.0 / b);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_case_analysis() {
        let eps = 0.2;
        assert_eq!(clipped_term(1.0, 0.7, eps), 0.7);
        // positive advantage above the band: clipped branch
        assert!((clipped_term(1.0 + 2.0 * eps, 1.5, eps) - (1.0 + eps) * 1.5).abs() < 1e-15);
        assert_eq!(clipped_term_slope(1.0 + 2.0 * eps, 1.5, eps), 0.0);
        // positive advantage below the band: unclipped branch is the min
        assert!((clipped_term(1.0 - 2.0 * eps, 1.5, eps) - (1.0 - 2.0 * eps) * 1.5).abs() < 1e-15);
        assert_eq!(clipped_term_slope(1.0 - 2.0 * eps, 1.5, eps), 1.5);
        // negative advantage below the band: clipped branch is the min
        assert!((clipped_term(1.0 - 2.0 * eps, -1.0, eps) + (1.0 - eps)).abs() < 1e-15);
        assert_eq!(clipped_term_slope(1.0 - 2.0 * eps, -1.0, eps), 0.0);
        // negative advantage above the band: unclipped
        assert_eq!(clipped_term_slope(1.0 + 2.0 * eps, -1.0, eps), -1.0);
    }
}
