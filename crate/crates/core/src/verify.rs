//! Independent oracles for the analytic gradients and the surrogate loss.
//!
//! Nothing here reuses the trainer's accumulation code paths: finite
//! differences only call a scalar function, the decomposition check rebuilds
//! the injected-label gradient from per-sequence `grad_logprob` tables, and
//! the brute-force surrogate multiplies raw probabilities.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{FrozenPolicy, ParamTable, TabularPolicy, TokenSequence, Vocab};
use crate::rng;
use crate::tasks::{ItemSet, TaskFamily, TaskInstance};
use crate::trainer::{batch_loss_and_grad, prepare_visurf, sft_loss_and_grad, LabeledExample, RunConfig};

/// Finite-difference step used throughout.
pub const FD_STEP: f64 = 1e-3;
/// Relative tolerance for analytic vs finite-difference gradients.
pub const FD_REL_TOL: f64 = 1e-6;
/// Derivatives smaller than this on both sides count as agreeing zeros.
pub const FD_ABS_FLOOR: f64 = 1e-9;
/// Tolerance for identities that hold up to rounding.
pub const EXACT_TOL: f64 = 1e-9;

fn eval_finite<F: Fn(&ParamTable) -> f64>(f: &F, theta: &ParamTable) -> Result<f64> {
    let v = f(theta);
    if !v.is_finite() {
        return Err(Error::Oracle(format!("function value {v} is not finite")));
    }
    Ok(v)
}

/// Five-point central differences at the given flat coordinates:
/// `(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h`, exact for quartics.
pub fn finite_diff_at<F>(f: F, theta: &ParamTable, h: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&ParamTable) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Oracle(format!("step h must be > 0, got {h}")));
    }
    let mut t = theta.clone();
    coords
        .iter()
        .map(|&i| {
            let x = t.as_slice()[i];
            let mut at = |dx: f64| {
                t.as_mut_slice()[i] = x + dx;
                eval_finite(&f, &t)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            t.as_mut_slice()[i] = x;
            Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
        })
        .collect()
}

/// Central-difference gradient over every coordinate of `theta`.
pub fn finite_diff_grad<F>(f: F, theta: &ParamTable, h: f64) -> Result<ParamTable>
where
    F: Fn(&ParamTable) -> f64,
{
    let all: Vec<usize> = (0..theta.as_slice().len()).collect();
    let g = finite_diff_at(f, theta, h, &all)?;
    Ok(ParamTable::from_vec(theta.shape(), g).expect("same length"))
}

/// Up to `n` distinct coordinates, always including the nonzero ones of
/// `focus` so the visited slots are covered.
pub fn sample_coords<R: Rng>(focus: &ParamTable, n: usize, r: &mut R) -> Vec<usize> {
    let len = focus.as_slice().len();
    let mut coords: Vec<usize> = focus
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect();
    let want = n.min(len);
    if coords.len() < want {
        let extra = rand::seq::index::sample(r, len, want);
        coords.extend(extra);
        coords.sort_unstable();
        coords.dedup();
    }
    coords
}

/// Worst-case disagreement between analytic and numeric derivatives:
/// the largest `|a - n| / max(|a|, |n|)`, skipping coordinates where both
/// are below [`FD_ABS_FLOOR`].
pub fn fd_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale <= FD_ABS_FLOOR {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

fn with_theta(policy: &TabularPolicy, theta: &ParamTable) -> TabularPolicy {
    let mut p = policy.clone();
    *p.theta_mut() = theta.clone();
    p
}

/// Compares `grad_logprob` with finite differences of `logprob`.
pub fn check_grad_logprob(policy: &TabularPolicy, context: usize, seq: &TokenSequence) -> Result<f64> {
    let analytic = policy.grad_logprob(context, seq)?;
    let f = |t: &ParamTable| with_theta(policy, t).logprob(context, seq).unwrap_or(f64::NAN);
    let numeric = finite_diff_grad(f, policy.theta(), FD_STEP)?;
    Ok(fd_rel_error(analytic.as_slice(), numeric.as_slice()))
}

/// Compares the SFT loss gradient with finite differences of the batch NLL.
pub fn check_sft_grad(policy: &TabularPolicy, batch: &[LabeledExample]) -> Result<f64> {
    let (_, analytic) = sft_loss_and_grad(policy, batch)?;
    let f = |t: &ParamTable| {
        sft_loss_and_grad(&with_theta(policy, t), batch)
            .map(|(l, _)| l)
            .unwrap_or(f64::NAN)
    };
    let numeric = finite_diff_grad(f, policy.theta(), FD_STEP)?;
    Ok(fd_rel_error(analytic.as_slice(), numeric.as_slice()))
}

/// Result of [`check_decomposition`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub max_abs_err: f64,
    pub pass: bool,
    /// Batch-averaged `sum_j A_j grad log pi(o_j) / (G+1)` over tasks.
    pub rlvr_term: ParamTable,
    /// Batch-averaged `A_y grad log pi(y) / (G+1)` over tasks.
    pub sft_term: ParamTable,
}

/// Checks that at sync the implemented gradient of the label-injected loss
/// equals `-(rlvr_term + sft_term)` assembled from per-sequence gradients.
///
/// Rollouts come from `policy` itself (as the old policy) at step 0.
pub fn check_decomposition(policy: &TabularPolicy, batch: &[TaskInstance], cfg: &RunConfig) -> Result<DecompositionReport> {
    let old: FrozenPolicy = policy.snapshot();
    let prepared = prepare_visurf(&old, batch, cfg, 0)?;
    let (_, implemented) = batch_loss_and_grad(policy, &prepared.groups, cfg.epsilon_clip)?;

    let shape = policy.shape();
    let mut rlvr_term = ParamTable::zeros(shape);
    let mut sft_term = ParamTable::zeros(shape);
    let b = batch.len() as f64;
    for (group, stats) in prepared.groups.iter().zip(&prepared.stats) {
        let w = 1.0 / ((cfg.group_size + 1) as f64 * b);
        let rollouts = group.members.iter().filter(|m| !m.is_label);
        for (m, &a) in rollouts.zip(&stats.advantages.a_rollouts) {
            rlvr_term.add_scaled(&policy.grad_logprob(group.context, &m.seq)?, a * w);
        }
        let label = group.members.iter().find(|m| m.is_label).expect("label member");
        let a_y = stats.advantages.a_label.expect("label advantage");
        if a_y != 0.0 {
            sft_term.add_scaled(&policy.grad_logprob(group.context, &label.seq)?, a_y * w);
        }
    }
    let mut assembled = ParamTable::zeros(shape);
    assembled.add_scaled(&rlvr_term, -1.0);
    assembled.add_scaled(&sft_term, -1.0);
    let max_abs_err = implemented.max_abs_diff(&assembled);
    Ok(DecompositionReport {
        max_abs_err,
        pass: max_abs_err < EXACT_TOL,
        rlvr_term,
        sft_term,
    })
}

/// Probability of a whole sequence as a plain product of step probabilities.
fn sequence_prob(policy: &TabularPolicy, context: usize, seq: &TokenSequence) -> Result<f64> {
    policy.validate(context, seq)?;
    let mut prev = policy.bos();
    let mut p = 1.0;
    for (pos, &tok) in seq.ids().iter().enumerate() {
        p *= policy.probs(context, pos, prev)[tok];
        prev = tok;
    }
    Ok(p)
}

/// Literal evaluation of `-(1/N) sum_i min(rho_i A_i, clip(rho_i) A_i)` with
/// `N` the group length.
pub fn brute_force_surrogate(
    policy: &TabularPolicy,
    old: &TabularPolicy,
    context: usize,
    group: &[TokenSequence],
    advantages: &[f64],
    epsilon: f64,
) -> Result<f64> {
    if group.len() != advantages.len() || group.is_empty() {
        return Err(Error::Oracle(format!(
            "{} sequences but {} advantages",
            group.len(),
            advantages.len()
        )));
    }
    let mut total = 0.0;
    for (seq, &a) in group.iter().zip(advantages) {
        let rho = sequence_prob(policy, context, seq)? / sequence_prob(old, context, seq)?;
        let clipped = if rho < 1.0 - epsilon {
            1.0 - epsilon
        } else if rho > 1.0 + epsilon {
            1.0 + epsilon
        } else {
            rho
        };
        let unclipped_term = rho * a;
        let clipped_term = clipped * a;
        total += if unclipped_term < clipped_term { unclipped_term } else { clipped_term };
    }
    Ok(-total / group.len() as f64)
}

/// Which oracle a trial exercised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    GradLogprob,
    SftGrad,
    Decomposition,
    Surrogate,
}

impl CheckKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CheckKind::GradLogprob => "grad_logprob",
            CheckKind::SftGrad => "sft_grad",
            CheckKind::Decomposition => "decomposition",
            CheckKind::Surrogate => "surrogate",
        }
    }
}

/// One line of the gradient-check trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub check: CheckKind,
    pub trial: usize,
    pub group_size: Option<usize>,
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Trials for each of the gradient and decomposition checks.
    pub trials: usize,
    /// Off-sync configurations for the surrogate cross-check.
    pub surrogate_trials: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            surrogate_trials: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub records: Vec<TrialRecord>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.records.iter().all(|r| r.pass)
    }

    pub fn of(&self, kind: CheckKind) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter(move |r| r.check == kind)
    }

    /// Largest error per check kind, with the pass count.
    pub fn summary(&self) -> Vec<(CheckKind, usize, usize, f64)> {
        [CheckKind::GradLogprob, CheckKind::SftGrad, CheckKind::Decomposition, CheckKind::Surrogate]
            .into_iter()
            .map(|k| {
                let rs: Vec<&TrialRecord> = self.of(k).collect();
                let worst = rs.iter().map(|r| r.error).fold(0.0, f64::max);
                (k, rs.iter().filter(|r| r.pass).count(), rs.len(), worst)
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("<trial log>", e))?;
        }
        Ok(())
    }
}

/// A policy with i.i.d. uniform logits in `[-scale, scale]` and a random
/// shared-block multiplier.
pub fn random_policy<R: Rng>(vocab: Vocab, contexts: usize, max_len: usize, scale: f64, r: &mut R) -> TabularPolicy {
    let mut p = TabularPolicy::new(vocab, contexts, max_len);
    for x in p.theta_mut().as_mut_slice() {
        *x = r.random_range(-scale..=scale);
    }
    p.set_shared_scale(r.random_range(0.25..=1.5)).expect("positive scale");
    p
}

/// A random task whose answer (possibly empty) fits in `max_len` tokens with
/// separators and a think block.
pub fn random_task<R: Rng>(id: u64, vocab: Vocab, contexts: usize, r: &mut R) -> TaskInstance {
    let size = r.random_range(0..=2.min(vocab.num_items()));
    let gt: ItemSet = rand::seq::index::sample(r, vocab.num_items(), size).into_iter().collect();
    TaskInstance {
        id,
        context: r.random_range(0..contexts),
        gt_items: gt,
        family: TaskFamily::PostTrain,
    }
}

/// Runs all randomized oracle checks.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut records = Vec::new();
    for trial in 0..cfg.trials {
        let mut r = rng::stream(cfg.seed, &[rng::tag::TRIAL, 0, trial as u64]);
        let vocab = Vocab::new(r.random_range(1..=3));
        let contexts = r.random_range(1..=3);
        let max_len = r.random_range(3..=8);
        let p = random_policy(vocab, contexts, max_len, 2.0, &mut r);
        let ctx = r.random_range(0..contexts);
        let seq = p.sample(ctx, &mut r);
        let err = check_grad_logprob(&p, ctx, &seq)?;
        records.push(fd_record(CheckKind::GradLogprob, trial, err));

        let batch: Vec<LabeledExample> = (0..r.random_range(1..=3))
            .map(|_| {
                let c = r.random_range(0..contexts);
                LabeledExample { context: c, label: p.sample(c, &mut r) }
            })
            .collect();
        let err = check_sft_grad(&p, &batch)?;
        records.push(fd_record(CheckKind::SftGrad, trial, err));
    }

    for trial in 0..cfg.trials {
        let mut r = rng::stream(cfg.seed, &[rng::tag::TRIAL, 1, trial as u64]);
        let g = [2, 4, 8][trial % 3];
        let vocab = Vocab::new(r.random_range(2..=4));
        let contexts = r.random_range(1..=3);
        let p = random_policy(vocab, contexts, 8, 1.5, &mut r);
        let tasks: Vec<TaskInstance> = (0..r.random_range(1..=3)).map(|i| random_task(i, vocab, contexts, &mut r)).collect();
        let mut run = RunConfig {
            group_size: g,
            seed: r.random(),
            ..RunConfig::default()
        };
        run.reward.controls.align = r.random();
        run.reward.controls.smooth = r.random();
        run.reward.controls.eliminate = r.random();
        let rep = check_decomposition(&p, &tasks, &run)?;
        records.push(TrialRecord {
            check: CheckKind::Decomposition,
            trial,
            group_size: Some(g),
            error: rep.max_abs_err,
            tolerance: EXACT_TOL,
            pass: rep.pass,
        });
    }

    for trial in 0..cfg.surrogate_trials {
        let mut r = rng::stream(cfg.seed, &[rng::tag::TRIAL, 2, trial as u64]);
        let err = surrogate_trial(&mut r, trial)?;
        records.push(TrialRecord {
            check: CheckKind::Surrogate,
            trial,
            group_size: None,
            error: err,
            tolerance: EXACT_TOL,
            pass: err < EXACT_TOL,
        });
    }
    Ok(GradcheckReport { records })
}

fn fd_record(check: CheckKind, trial: usize, err: f64) -> TrialRecord {
    TrialRecord {
        check,
        trial,
        group_size: None,
        error: err,
        tolerance: FD_REL_TOL,
        pass: err < FD_REL_TOL,
    }
}

/// Trainer loss vs brute force for one task after an off-sync perturbation.
fn surrogate_trial<R: Rng>(r: &mut R, trial: usize) -> Result<f64> {
    let g = [2, 4, 8][trial % 3];
    let vocab = Vocab::new(r.random_range(2..=4));
    let contexts = r.random_range(1..=2);
    let old_policy = random_policy(vocab, contexts, 8, 1.5, r);
    let task = random_task(trial as u64, vocab, contexts, r);
    let mut run = RunConfig {
        group_size: g,
        seed: r.random(),
        epsilon_clip: r.random_range(0.05..0.4),
        ..RunConfig::default()
    };
    run.reward.controls.smooth = r.random();
    let old = old_policy.snapshot();
    let prepared = prepare_visurf(&old, std::slice::from_ref(&task), &run, 0)?;
    let mut policy = old_policy.clone();
    for x in policy.theta_mut().as_mut_slice() {
        *x += r.random_range(-0.5..=0.5);
    }
    let (loss, _) = batch_loss_and_grad(&policy, &prepared.groups, run.epsilon_clip)?;
    let group = &prepared.groups[0];
    let seqs: Vec<TokenSequence> = group.members.iter().map(|m| m.seq.clone()).collect();
    let adv: Vec<f64> = group.members.iter().map(|m| m.advantage).collect();
    let brute = brute_force_surrogate(&policy, &old, task.context, &seqs, &adv, run.epsilon_clip)?;
    Ok((loss - brute).abs())
}
