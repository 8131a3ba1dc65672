//! Multi-seed experiments: config files, per-run metric files, comparison
//! reports, the forgetting probe and plots.
//!
//! An experiment directory looks like
//!
//! ```text
//! <out_dir>/
//!   spec.toml              the spec as run (after CLI overrides)
//!   train.jsonl eval.jsonl the dataset split
//!   runs/<paradigm>/seed_<s>/metrics.jsonl   one StepMetrics per line
//!   runs/<paradigm>/seed_<s>/evals.jsonl     one EvalPoint per line
//!   runs/<paradigm>/seed_<s>/final.ckpt      final policy
//!   summary.csv            one row per (paradigm, seed)
//!   report.json            the full ComparisonReport
//! ```

mod forgetting;
mod plots;
mod single;

pub use forgetting::{forgetting_probe, prefit_held, ForgettingReport, PrefitConfig, PrefitOutcome, RetentionRow};
pub use plots::{emit_plots, read_metric_rows, CurveRow, EvalRow, MetricRow, PlotFiles};
pub use single::{load_dataset_params, read_policy, read_tasks, train_single, TrainSpec};

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::mean;
use crate::error::{Error, Result};
use crate::policy::{write_checkpoint, FormatPrior, TabularPolicy, Vocab};
use crate::tasks::{generate, write_jsonl, DatasetParams, Split, TaskInstance};
use crate::trainer::{evaluate, run_training, EvalReport, Paradigm, RunConfig, StepMetrics};

/// Seeds used when a spec does not list any.
pub const DEFAULT_SWEEP_SEEDS: u64 = 10;

/// How the initial policy is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySetup {
    pub max_len: usize,
    /// Multiplier on the shared block; see `TabularPolicy::set_shared_scale`.
    pub shared_scale: f64,
    pub prior: FormatPrior,
}

impl Default for PolicySetup {
    fn default() -> Self {
        Self {
            max_len: 16,
            shared_scale: 0.5,
            prior: FormatPrior::default(),
        }
    }
}

impl PolicySetup {
    pub fn build(&self, dataset: &DatasetParams) -> Result<TabularPolicy> {
        let mut p = TabularPolicy::with_format_prior(
            Vocab::new(dataset.layout.num_items),
            dataset.layout.num_contexts,
            self.max_len,
            self.prior,
        );
        p.set_shared_scale(self.shared_scale)?;
        Ok(p)
    }
}

pub(crate) fn default_eval_every() -> usize {
    50
}

fn default_seeds() -> Vec<u64> {
    (0..DEFAULT_SWEEP_SEEDS).collect()
}

/// A comparison experiment, normally read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub dataset: DatasetParams,
    #[serde(default)]
    pub policy: PolicySetup,
    /// Evaluate on the eval split every this many steps (and at the end).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Where run files go; nothing is written when absent.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Settings for the held-family pre-fit of the forgetting probe.
    #[serde(default)]
    pub prefit: PrefitConfig,
    /// One run configuration per paradigm; each seed overrides `seed`.
    pub runs: Vec<RunConfig>,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.runs.is_empty() {
            return Err(Error::Config("at least one run is required".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &self.runs {
            if !seen.insert(r.paradigm) {
                return Err(Error::Config(format!("paradigm `{}` listed twice", r.paradigm)));
            }
            r.validate()?;
        }
        self.dataset.layout.validate()?;
        self.prefit.validate()
    }

    /// Sets the step budget of every run.
    pub fn override_steps(&mut self, steps: usize) -> Result<()> {
        for r in &mut self.runs {
            r.steps = steps;
        }
        self.validate()
    }

    /// Replaces the seed list with the single seed `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = vec![seed];
    }

    pub fn initial_policy(&self) -> Result<TabularPolicy> {
        self.policy.build(&self.dataset)
    }

    pub fn split(&self) -> Result<Split> {
        let d = generate(&self.dataset)?;
        Ok(d.split(self.dataset.eval_fraction))
    }
}

/// Evaluation after `steps_done` training steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub steps_done: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { category: String, message: String },
}

/// Everything recorded for one (paradigm, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub paradigm: Paradigm,
    pub seed: u64,
    pub status: RunStatus,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalPoint>,
    pub final_eval: Option<EvalReport>,
}

impl RunResult {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn final_entropy(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.entropy)
    }
}

/// Per-paradigm aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub paradigm: Paradigm,
    pub completed: usize,
    pub failed: usize,
    pub mean_iou_mean: f64,
    pub mean_iou_std: f64,
    pub n_acc_mean: Option<f64>,
    pub n_acc_std: Option<f64>,
    /// Per-seed final `n_acc`, in seed order.
    pub n_acc_per_seed: Vec<(u64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub name: String,
    /// Evaluation of the initial policy.
    pub baseline: EvalReport,
    /// Runs in spec order, seeds in spec order within each paradigm.
    pub runs: Vec<RunResult>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = mean(xs);
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

impl ComparisonReport {
    pub fn paradigms(&self) -> Vec<Paradigm> {
        let mut out: Vec<Paradigm> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.paradigm) {
                out.push(r.paradigm);
            }
        }
        out
    }

    pub fn runs_for(&self, paradigm: Paradigm) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.paradigm == paradigm)
    }

    /// Mean entropy per step over the completed seeds of `paradigm`.
    pub fn entropy_curve(&self, paradigm: Paradigm) -> Vec<(usize, f64)> {
        let runs: Vec<&RunResult> = self.runs_for(paradigm).filter(|r| r.completed()).collect();
        let steps = runs.iter().map(|r| r.metrics.len()).min().unwrap_or(0);
        (0..steps)
            .map(|s| (s, mean(&runs.iter().map(|r| r.metrics[s].entropy).collect::<Vec<_>>())))
            .collect()
    }

    /// Mean eval IoU per evaluation point over the completed seeds.
    pub fn stability_curve(&self, paradigm: Paradigm) -> Vec<(usize, f64)> {
        let runs: Vec<&RunResult> = self.runs_for(paradigm).filter(|r| r.completed()).collect();
        let points = runs.iter().map(|r| r.evals.len()).min().unwrap_or(0);
        (0..points)
            .map(|i| {
                let at = runs[0].evals[i].steps_done;
                (at, mean(&runs.iter().map(|r| r.evals[i].report.mean_iou).collect::<Vec<_>>()))
            })
            .collect()
    }

    pub fn seed_summary(&self) -> Vec<SeedSummary> {
        self.paradigms()
            .into_iter()
            .map(|p| {
                let all: Vec<&RunResult> = self.runs_for(p).collect();
                let done: Vec<&EvalReport> = all.iter().filter_map(|r| r.final_eval.as_ref()).collect();
                let (iou_m, iou_s) = mean_std(&done.iter().map(|e| e.mean_iou).collect::<Vec<_>>());
                let naccs: Vec<f64> = done.iter().filter_map(|e| e.n_acc).collect();
                let (na_m, na_s) = mean_std(&naccs);
                SeedSummary {
                    paradigm: p,
                    completed: done.len(),
                    failed: all.len() - done.len(),
                    mean_iou_mean: iou_m,
                    mean_iou_std: iou_s,
                    n_acc_mean: (!naccs.is_empty()).then_some(na_m),
                    n_acc_std: (!naccs.is_empty()).then_some(na_s),
                    n_acc_per_seed: all
                        .iter()
                        .map(|r| (r.seed, r.final_eval.as_ref().and_then(|e| e.n_acc)))
                        .collect(),
                }
            })
            .collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    paradigm: Paradigm,
    seed: u64,
    status: &'a str,
    steps: usize,
    mean_iou: Option<f64>,
    n_acc: Option<f64>,
    format_rate: Option<f64>,
    final_entropy: Option<f64>,
    labels_used: usize,
    rollouts_used: usize,
}

/// Writes `summary.csv` for a report.
pub fn write_summary_csv(report: &ComparisonReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &report.runs {
        let fe = r.final_eval.as_ref();
        w.serialize(SummaryRow {
            paradigm: r.paradigm,
            seed: r.seed,
            status: if r.completed() { "completed" } else { "failed" },
            steps: r.metrics.len(),
            mean_iou: fe.map(|e| e.mean_iou),
            n_acc: fe.and_then(|e| e.n_acc),
            format_rate: fe.map(|e| e.format_rate),
            final_entropy: r.final_entropy(),
            labels_used: r.metrics.iter().map(|m| m.labels_used).sum(),
            rollouts_used: r.metrics.iter().map(|m| m.rollouts_used).sum(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_tasks(path: &Path, tasks: &[TaskInstance]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_jsonl(tasks, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_policy(path: &Path, policy: &TabularPolicy) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(policy, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

/// Directory of one run under an experiment root.
pub fn run_dir(root: &Path, paradigm: Paradigm, seed: u64) -> PathBuf {
    root.join("runs").join(paradigm.as_str()).join(format!("seed_{seed}"))
}

/// Trains one configuration, evaluating every `eval_every` steps.
///
/// Files go to `dir` when given. Errors are returned, not recorded; see
/// [`run_job`] for the recording wrapper.
pub fn train_and_track(
    cfg: &RunConfig,
    initial: TabularPolicy,
    train: &[TaskInstance],
    eval_set: &[TaskInstance],
    eval_every: usize,
    dir: Option<&Path>,
) -> Result<(TabularPolicy, Vec<StepMetrics>, Vec<EvalPoint>)> {
    let mut evals = vec![EvalPoint {
        steps_done: 0,
        report: evaluate(&initial, eval_set)?,
    }];
    let outcome = run_training(cfg, initial, train, |m, policy| {
        let done = m.step + 1;
        if done % eval_every == 0 || done == cfg.steps {
            evals.push(EvalPoint {
                steps_done: done,
                report: evaluate(policy, eval_set)?,
            });
        }
        Ok(())
    })?;
    if let Some(dir) = dir {
        create_dir(dir)?;
        write_lines(&dir.join("metrics.jsonl"), &outcome.metrics)?;
        write_lines(&dir.join("evals.jsonl"), &evals)?;
        write_policy(&dir.join("final.ckpt"), &outcome.policy)?;
    }
    Ok((outcome.policy, outcome.metrics, evals))
}

/// Like [`train_and_track`] but turns a failure into a `Failed` record.
pub fn run_job(
    cfg: &RunConfig,
    initial: TabularPolicy,
    train: &[TaskInstance],
    eval_set: &[TaskInstance],
    eval_every: usize,
    dir: Option<&Path>,
) -> (RunResult, Option<TabularPolicy>) {
    match train_and_track(cfg, initial, train, eval_set, eval_every, dir) {
        Ok((policy, metrics, evals)) => {
            let final_eval = evals.last().map(|e| e.report.clone());
            (
                RunResult {
                    paradigm: cfg.paradigm,
                    seed: cfg.seed,
                    status: RunStatus::Completed,
                    metrics,
                    evals,
                    final_eval,
                },
                Some(policy),
            )
        }
        Err(e) => (
            RunResult {
                paradigm: cfg.paradigm,
                seed: cfg.seed,
                status: RunStatus::Failed {
                    category: e.category().to_string(),
                    message: e.to_string(),
                },
                metrics: Vec::new(),
                evals: Vec::new(),
                final_eval: None,
            },
            None,
        ),
    }
}

/// All `(run, seed)` configurations of a spec, in report order.
pub fn jobs(spec: &ExperimentSpec) -> Vec<RunConfig> {
    spec.runs
        .iter()
        .flat_map(|r| spec.seeds.iter().map(move |&s| RunConfig { seed: s, ..r.clone() }))
        .collect()
}

/// Runs every paradigm for every seed on one shared dataset split.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ComparisonReport> {
    spec.validate()?;
    let split = spec.split()?;
    if split.train.is_empty() || split.eval.is_empty() {
        return Err(Error::EmptyDataset("train or eval split is empty".into()));
    }
    let initial = spec.initial_policy()?;
    let baseline = evaluate(&initial, &split.eval)?;
    let root = spec.out_dir.as_deref();
    if let Some(root) = root {
        create_dir(root)?;
        fs::write(root.join("spec.toml"), spec.to_toml()?).map_err(|e| Error::io(root, e))?;
        write_tasks(&root.join("train.jsonl"), &split.train)?;
        write_tasks(&root.join("eval.jsonl"), &split.eval)?;
    }
    let runs: Vec<RunResult> = jobs(spec)
        .par_iter()
        .map(|cfg| {
            let dir = root.map(|r| run_dir(r, cfg.paradigm, cfg.seed));
            run_job(cfg, initial.clone(), &split.train, &split.eval, spec.eval_every, dir.as_deref()).0
        })
        .collect();
    let report = ComparisonReport {
        name: spec.name.clone(),
        baseline,
        runs,
    };
    if let Some(root) = root {
        write_summary_csv(&report, &root.join("summary.csv"))?;
        report.write_json(&root.join("report.json"))?;
    }
    Ok(report)
}
