//! Forgetting probe: fit the held family first, post-train on the rest, then
//! measure how much of the held family survives.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;
use crate::tasks::{serialize_label, with_think_block, SerializationVariant, TaskFamily, TaskInstance};
use crate::trainer::{evaluate, sft_step, LabeledExample, Paradigm};

use super::{create_dir, jobs, run_dir, run_job, write_lines, ExperimentSpec, RunStatus};

/// SFT pre-fit of the held family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrefitConfig {
    pub lr: f64,
    /// Held-family eval IoU that must be reached.
    pub target: f64,
    pub max_steps: usize,
    /// Extra steps taken after the target is first reached.
    pub settle_steps: usize,
    /// Prefix pre-fit labels with an empty think block.
    pub think: bool,
}

impl Default for PrefitConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            target: 0.95,
            max_steps: 2000,
            settle_steps: 50,
            think: true,
        }
    }
}

impl PrefitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("prefit lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.target) {
            return Err(Error::Config(format!("prefit target {} outside [0, 1]", self.target)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefitOutcome {
    pub policy: TabularPolicy,
    pub steps: usize,
    /// Held-family eval IoU after the pre-fit.
    pub score: f64,
}

/// Full-batch SFT on the held training instances until the held eval IoU
/// reaches `cfg.target`, then `cfg.settle_steps` more.
pub fn prefit_held(
    mut policy: TabularPolicy,
    held_train: &[TaskInstance],
    held_eval: &[TaskInstance],
    cfg: &PrefitConfig,
) -> Result<PrefitOutcome> {
    if held_train.is_empty() || held_eval.is_empty() {
        return Err(Error::PreFit("no held-family instances to fit".into()));
    }
    let vocab = policy.vocab();
    let batch: Vec<LabeledExample> = held_train
        .iter()
        .map(|t| {
            let plain = serialize_label(&t.gt_items, SerializationVariant::CANONICAL, &vocab);
            LabeledExample {
                context: t.context,
                label: if cfg.think { with_think_block(&plain) } else { plain },
            }
        })
        .collect();
    let mut steps = 0;
    let mut reached = None;
    loop {
        let score = evaluate(&policy, held_eval)?.mean_iou;
        if reached.is_none() && score >= cfg.target {
            reached = Some(steps);
        }
        if let Some(at) = reached {
            if steps >= at + cfg.settle_steps {
                return Ok(PrefitOutcome { policy, steps, score });
            }
        }
        if steps >= cfg.max_steps + cfg.settle_steps || (reached.is_none() && steps >= cfg.max_steps) {
            return Err(Error::PreFit(format!(
                "held-family IoU {score:.4} below target {} after {steps} steps",
                cfg.target
            )));
        }
        sft_step(&mut policy, &batch, cfg.lr)?;
        steps += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub paradigm: Paradigm,
    pub seed: u64,
    pub status: RunStatus,
    /// Held-family eval IoU after post-training.
    pub retention: Option<f64>,
    /// Post-train-family eval IoU after post-training.
    pub post_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub name: String,
    pub prefit_steps: usize,
    pub prefit_score: f64,
    pub rows: Vec<RetentionRow>,
}

impl ForgettingReport {
    pub fn retention(&self, paradigm: Paradigm, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.paradigm == paradigm && r.seed == seed)
            .and_then(|r| r.retention)
    }

    /// Mean retention over the completed seeds of `paradigm`.
    pub fn mean_retention(&self, paradigm: Paradigm) -> Option<f64> {
        let xs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.paradigm == paradigm)
            .filter_map(|r| r.retention)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn family(tasks: &[TaskInstance], f: TaskFamily) -> Vec<TaskInstance> {
    tasks.iter().filter(|t| t.family == f).cloned().collect()
}

/// Pre-fits the held family, post-trains every paradigm and seed on the
/// post-train family only, and reports held-family retention.
///
/// Aborts with a pre-fit error when the held family cannot be fitted.
pub fn forgetting_probe(spec: &ExperimentSpec) -> Result<ForgettingReport> {
    spec.validate()?;
    let split = spec.split()?;
    let held_train = family(&split.train, TaskFamily::PretrainHeld);
    let held_eval = family(&split.eval, TaskFamily::PretrainHeld);
    let post_train = family(&split.train, TaskFamily::PostTrain);
    let post_eval = family(&split.eval, TaskFamily::PostTrain);
    if held_eval.is_empty() || post_eval.is_empty() {
        return Err(Error::Config("forgetting probe needs both task families in the eval split".into()));
    }
    let pre = prefit_held(spec.initial_policy()?, &held_train, &held_eval, &spec.prefit)?;
    let root = spec.out_dir.as_ref().map(|r| r.join("forgetting"));
    let rows: Vec<RetentionRow> = jobs(spec)
        .par_iter()
        .map(|cfg| {
            let dir = root.as_deref().map(|r| run_dir(r, cfg.paradigm, cfg.seed));
            let (res, policy) = run_job(cfg, pre.policy.clone(), &post_train, &post_eval, spec.eval_every, dir.as_deref());
            let retention = policy.as_ref().map(|p| evaluate(p, &held_eval).map(|e| e.mean_iou));
            match retention {
                Some(Err(e)) => RetentionRow {
                    paradigm: cfg.paradigm,
                    seed: cfg.seed,
                    status: RunStatus::Failed {
                        category: e.category().to_string(),
                        message: e.to_string(),
                    },
                    retention: None,
                    post_iou: None,
                },
                r => RetentionRow {
                    paradigm: cfg.paradigm,
                    seed: cfg.seed,
                    status: res.status.clone(),
                    retention: r.map(|x| x.expect("error handled above")),
                    post_iou: res.final_eval.as_ref().map(|e| e.mean_iou),
                },
            }
        })
        .collect();
    let report = ForgettingReport {
        name: spec.name.clone(),
        prefit_steps: pre.steps,
        prefit_score: pre.score,
        rows,
    };
    if let Some(root) = root {
        write_retention(&root, &report)?;
    }
    Ok(report)
}

fn write_retention(root: &Path, report: &ForgettingReport) -> Result<()> {
    create_dir(root)?;
    write_lines(&root.join("retention.jsonl"), &report.rows)?;
    let path = root.join("retention.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["paradigm", "seed", "retention", "post_iou", "prefit_score"])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in &report.rows {
        w.write_record([
            r.paradigm.as_str().to_string(),
            r.seed.to_string(),
            opt(r.retention),
            opt(r.post_iou),
            report.prefit_score.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
