//! Training paradigms: SFT, RLVR, two-stage SFT then RLVR, and RLVR with the
//! ground-truth label injected into every rollout group.
//!
//! Every group-based step follows the same outline: snapshot the current
//! policy as the old policy, sample `G` rollouts per task from it, score them,
//! normalize rewards into advantages, then take `inner_updates` gradient
//! descent steps on the clipped surrogate.

mod config;
mod eval;
pub mod objective;

pub use config::{BatchSampling, Paradigm, RunConfig, Stage, StepMetrics};
pub use eval::{evaluate, EvalReport, FamilyReport};
pub use objective::{batch_loss_and_grad, clipped_term, GroupMember, ScoredGroup};

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::advantage::{advantage_augmented, advantage_grpo, AdvantageSet};
use crate::error::{Error, Result};
use crate::policy::{sync_old, write_checkpoint, FrozenPolicy, ParamTable, RolloutKey, TabularPolicy, TokenSequence};
use crate::reward::{score_label, score_rollouts, RewardBreakdown};
use crate::rng;
use crate::tasks::{align_label, canonicalize_label, serialize_label, SerializationVariant, TaskInstance};

/// A context paired with the label sequence to imitate.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub context: usize,
    pub label: TokenSequence,
}

/// What one update step did, before entropy is measured.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub stage: Stage,
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_rollout_reward: Option<f64>,
    pub label_reward: Option<f64>,
    pub a_label_mean: Option<f64>,
    pub smoothed_fraction: Option<f64>,
    pub degenerate_fraction: Option<f64>,
    pub labels_used: usize,
    pub rollouts_used: usize,
}

/// Rewards and advantages of one task's group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub rollout_rewards: Vec<RewardBreakdown>,
    pub label_reward: Option<RewardBreakdown>,
    pub advantages: AdvantageSet,
}

/// Scored groups for a batch, sampled from one old-policy snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub groups: Vec<ScoredGroup>,
    pub stats: Vec<GroupStats>,
}

/// The SFT label: the old policy's preferred serialization when `align` is
/// on, the fixed ascending-with-separators form otherwise. Never has a think
/// block.
pub fn label_for(task: &TaskInstance, old: &TabularPolicy, align: bool) -> Result<TokenSequence> {
    if align {
        canonicalize_label(&task.gt_items, old, task.context)
    } else {
        Ok(serialize_label(&task.gt_items, SerializationVariant::CANONICAL, &old.vocab()))
    }
}

/// The label injected into a ViSuRF group. With `align` on it follows the
/// old policy's format as well, including an empty think block when the
/// policy prefers to reason first.
pub fn injected_label(task: &TaskInstance, old: &TabularPolicy, align: bool) -> Result<TokenSequence> {
    if align {
        align_label(&task.gt_items, old, task.context)
    } else {
        label_for(task, old, false)
    }
}

/// Mean negative log-likelihood of the labels and its gradient.
pub fn sft_loss_and_grad(policy: &TabularPolicy, batch: &[LabeledExample]) -> Result<(f64, ParamTable)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty SFT batch".into()));
    }
    let b = batch.len() as f64;
    let mut grad = ParamTable::zeros(policy.shape());
    let mut loss = 0.0;
    for ex in batch {
        loss -= policy.logprob(ex.context, &ex.label)? / b;
        policy.accumulate_grad_logprob(ex.context, &ex.label, -1.0 / b, &mut grad)?;
    }
    Ok((loss, grad))
}

/// One gradient-descent step on the label NLL. The reported loss is the
/// batch mean NLL before the update.
pub fn sft_step(policy: &mut TabularPolicy, batch: &[LabeledExample], lr: f64) -> Result<StepReport> {
    let (loss, grad) = sft_loss_and_grad(policy, batch)?;
    policy.apply_descent(&grad, lr);
    Ok(StepReport {
        stage: Stage::Sft,
        loss,
        grad_norm: grad.norm(),
        mean_rollout_reward: None,
        label_reward: None,
        a_label_mean: None,
        smoothed_fraction: None,
        degenerate_fraction: None,
        labels_used: batch.len(),
        rollouts_used: 0,
    })
}

fn rollout_key(cfg: &RunConfig, step: u64, task: &TaskInstance) -> RolloutKey {
    RolloutKey {
        seed: cfg.seed,
        step,
        task_id: task.id,
    }
}

fn rollout_members(
    old: &TabularPolicy,
    context: usize,
    rollouts: Vec<TokenSequence>,
    advantages: &[f64],
) -> Result<Vec<GroupMember>> {
    rollouts
        .into_iter()
        .zip(advantages)
        .map(|(seq, &a)| {
            Ok(GroupMember {
                old_logprob: old.logprob(context, &seq)?,
                seq,
                advantage: a,
                is_label: false,
            })
        })
        .collect()
}

/// Samples and scores plain RLVR groups (normalizer `G`).
pub fn prepare_rlvr(old: &TabularPolicy, batch: &[TaskInstance], cfg: &RunConfig, step: u64) -> Result<PreparedBatch> {
    let vocab = old.vocab();
    let per_task: Vec<Result<(ScoredGroup, GroupStats)>> = batch
        .par_iter()
        .map(|task| {
            let rollouts = old.sample_group(task.context, cfg.group_size, rollout_key(cfg, step, task))?;
            let rewards = score_rollouts(&rollouts, task, &cfg.reward, &vocab);
            let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
            let adv = advantage_grpo(&totals)?;
            let members = rollout_members(old, task.context, rollouts, &adv.a_rollouts)?;
            Ok((
                ScoredGroup {
                    context: task.context,
                    members,
                    normalizer: cfg.group_size,
                },
                GroupStats {
                    rollout_rewards: rewards,
                    label_reward: None,
                    advantages: adv,
                },
            ))
        })
        .collect();
    collect_prepared(per_task)
}

/// Samples and scores groups with the injected label (normalizer `G + 1`).
pub fn prepare_visurf(old: &TabularPolicy, batch: &[TaskInstance], cfg: &RunConfig, step: u64) -> Result<PreparedBatch> {
    let vocab = old.vocab();
    let per_task: Vec<Result<(ScoredGroup, GroupStats)>> = batch
        .par_iter()
        .map(|task| {
            let rollouts = old.sample_group(task.context, cfg.group_size, rollout_key(cfg, step, task))?;
            let rewards = score_rollouts(&rollouts, task, &cfg.reward, &vocab);
            let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
            let label = injected_label(task, old, cfg.reward.controls.align)?;
            let label_reward = score_label(&label, task, &totals, &cfg.reward, &vocab)?;
            let adv = advantage_augmented(&totals, label_reward.total)?;
            let mut members = rollout_members(old, task.context, rollouts, &adv.a_rollouts)?;
            members.push(GroupMember {
                old_logprob: old.logprob(task.context, &label)?,
                seq: label,
                advantage: adv.a_label.expect("augmented set has a label advantage"),
                is_label: true,
            });
            Ok((
                ScoredGroup {
                    context: task.context,
                    members,
                    normalizer: cfg.group_size + 1,
                },
                GroupStats {
                    rollout_rewards: rewards,
                    label_reward: Some(label_reward),
                    advantages: adv,
                },
            ))
        })
        .collect();
    collect_prepared(per_task)
}

fn collect_prepared(per_task: Vec<Result<(ScoredGroup, GroupStats)>>) -> Result<PreparedBatch> {
    let mut groups = Vec::with_capacity(per_task.len());
    let mut stats = Vec::with_capacity(per_task.len());
    for r in per_task {
        let (g, s) = r?;
        groups.push(g);
        stats.push(s);
    }
    Ok(PreparedBatch { groups, stats })
}

/// Runs `inner_updates` descent steps on a prepared batch.
/// Returns the mean loss over the inner steps and the first gradient norm.
fn optimize(policy: &mut TabularPolicy, prepared: &PreparedBatch, cfg: &RunConfig) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut first_norm = None;
    for _ in 0..cfg.inner_updates {
        let (loss, grad) = batch_loss_and_grad(policy, &prepared.groups, cfg.epsilon_clip)?;
        loss_sum += loss;
        first_norm.get_or_insert(grad.norm());
        policy.apply_descent(&grad, cfg.lr);
    }
    Ok((loss_sum / cfg.inner_updates as f64, first_norm.unwrap_or(0.0)))
}

fn group_report(stage: Stage, prepared: &PreparedBatch, loss: f64, grad_norm: f64) -> StepReport {
    let n = prepared.stats.len().max(1) as f64;
    let rollouts: Vec<f64> = prepared
        .stats
        .iter()
        .flat_map(|s| s.rollout_rewards.iter().map(|r| r.total))
        .collect();
    let labels: Vec<&RewardBreakdown> = prepared.stats.iter().filter_map(|s| s.label_reward.as_ref()).collect();
    let has_labels = !labels.is_empty();
    let label_mean = |f: &dyn Fn(&GroupStats) -> f64| prepared.stats.iter().map(f).sum::<f64>() / n;
    StepReport {
        stage,
        loss,
        grad_norm,
        mean_rollout_reward: Some(rollouts.iter().sum::<f64>() / rollouts.len().max(1) as f64),
        label_reward: has_labels.then(|| labels.iter().map(|l| l.total).sum::<f64>() / n),
        a_label_mean: has_labels.then(|| label_mean(&|s| s.advantages.a_label.unwrap_or(0.0))),
        smoothed_fraction: has_labels.then(|| labels.iter().filter(|l| l.smoothed).count() as f64 / n),
        degenerate_fraction: Some(prepared.stats.iter().filter(|s| s.advantages.degenerate).count() as f64 / n),
        labels_used: labels.len(),
        rollouts_used: rollouts.len(),
    }
}

/// One RLVR step: sync the old policy, sample, score, update.
pub fn rlvr_step(
    policy: &mut TabularPolicy,
    old: &mut FrozenPolicy,
    batch: &[TaskInstance],
    cfg: &RunConfig,
    step: u64,
) -> Result<StepReport> {
    sync_old(policy, old);
    let prepared = prepare_rlvr(old, batch, cfg, step)?;
    let (loss, norm) = optimize(policy, &prepared, cfg)?;
    Ok(group_report(Stage::Rlvr, &prepared, loss, norm))
}

/// One step with the label injected into every group.
pub fn visurf_step(
    policy: &mut TabularPolicy,
    old: &mut FrozenPolicy,
    batch: &[TaskInstance],
    cfg: &RunConfig,
    step: u64,
) -> Result<StepReport> {
    sync_old(policy, old);
    let prepared = prepare_visurf(old, batch, cfg, step)?;
    let (loss, norm) = optimize(policy, &prepared, cfg)?;
    Ok(group_report(Stage::Visurf, &prepared, loss, norm))
}

/// Draws the batch for `step`.
pub fn draw_batch(train: &[TaskInstance], cfg: &RunConfig, step: u64) -> Vec<TaskInstance> {
    let mut r = rng::stream(cfg.seed, &[rng::tag::BATCH, step]);
    match cfg.batch_sampling {
        BatchSampling::Uniform => pick(train.iter().collect(), cfg.batch_size, &mut r),
        BatchSampling::Stratified => {
            let (empty, object): (Vec<&TaskInstance>, Vec<&TaskInstance>) =
                train.iter().partition(|t| t.is_non_object());
            let share = empty.len() as f64 / train.len().max(1) as f64;
            let mut n_empty = (cfg.batch_size as f64 * share).round() as usize;
            if object.is_empty() {
                n_empty = cfg.batch_size;
            }
            let mut out = pick(empty, n_empty, &mut r);
            out.extend(pick(object, cfg.batch_size - n_empty, &mut r));
            out
        }
    }
}

/// `k` distinct elements when possible, with replacement otherwise.
fn pick<R: Rng>(pool: Vec<&TaskInstance>, k: usize, r: &mut R) -> Vec<TaskInstance> {
    if pool.is_empty() || k == 0 {
        return Vec::new();
    }
    if k <= pool.len() {
        index::sample(r, pool.len(), k).into_iter().map(|i| pool[i].clone()).collect()
    } else {
        (0..k).map(|_| pool[r.random_range(0..pool.len())].clone()).collect()
    }
}

/// Distinct contexts of a task list, ascending.
pub fn contexts_of(tasks: &[TaskInstance]) -> Vec<usize> {
    tasks.iter().map(|t| t.context).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Final policy and the full metric stream of a run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub policy: TabularPolicy,
}

/// Runs `cfg.steps` steps of the configured paradigm starting from `initial`.
///
/// `observer` sees every step's metrics together with the updated policy;
/// returning an error aborts the run.
pub fn run_training<F>(cfg: &RunConfig, initial: TabularPolicy, train: &[TaskInstance], mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(&StepMetrics, &TabularPolicy) -> Result<()>,
{
    cfg.validate()?;
    if cfg.steps > 0 && train.is_empty() {
        return Err(Error::EmptyDataset("no training instances".into()));
    }
    let contexts = contexts_of(train);
    let mut policy = initial;
    let mut old = policy.snapshot();
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let s = step as u64;
        let batch = draw_batch(train, cfg, s);
        let stage = match cfg.paradigm {
            Paradigm::Sft => Stage::Sft,
            Paradigm::Rlvr => Stage::Rlvr,
            Paradigm::Visurf => Stage::Visurf,
            Paradigm::SftThenRlvr if step < cfg.split_step() => Stage::Sft,
            Paradigm::SftThenRlvr => Stage::Rlvr,
        };
        let report = match stage {
            Stage::Sft => {
                let examples = batch
                    .iter()
                    .map(|t| {
                        Ok(LabeledExample {
                            context: t.context,
                            label: label_for(t, &policy, cfg.reward.controls.align)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                sft_step(&mut policy, &examples, cfg.lr)?
            }
            Stage::Rlvr => rlvr_step(&mut policy, &mut old, &batch, cfg, s)?,
            Stage::Visurf => visurf_step(&mut policy, &mut old, &batch, cfg, s)?,
        };
        let mut er = rng::stream(cfg.seed, &[rng::tag::ENTROPY, s]);
        let entropy = policy.mean_token_entropy(&contexts, cfg.entropy_samples, &mut er)?;
        let m = StepMetrics {
            step,
            stage: report.stage,
            loss: report.loss,
            mean_rollout_reward: report.mean_rollout_reward,
            label_reward: report.label_reward,
            a_label_mean: report.a_label_mean,
            entropy,
            grad_norm: report.grad_norm,
            smoothed_fraction: report.smoothed_fraction,
            degenerate_fraction: report.degenerate_fraction,
            labels_used: report.labels_used,
            rollouts_used: report.rollouts_used,
        };
        observer(&m, &policy)?;
        maybe_checkpoint(cfg, step + 1, &policy)?;
        metrics.push(m);
    }
    Ok(TrainOutcome { metrics, policy })
}

fn maybe_checkpoint(cfg: &RunConfig, done: usize, policy: &TabularPolicy) -> Result<()> {
    let (Some(every), Some(dir)) = (cfg.checkpoint_every, cfg.checkpoint_dir.as_ref()) else {
        return Ok(());
    };
    if !done.is_multiple_of(every) && done != cfg.steps {
        return Ok(());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("step_{done:06}.ckpt"));
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_checkpoint(policy, BufWriter::new(f)).map_err(|e| Error::io(&path, e))
}
