//! One training run from a config file, plus the file readers used by the CLI.
//!
//! A run directory looks like
//!
//! ```text
//! <out>/
//!   train.toml   the spec as run
//!   train.jsonl eval.jsonl
//!   metrics.jsonl evals.jsonl final.ckpt
//! ```

use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{read_checkpoint, TabularPolicy};
use crate::tasks::{generate, read_jsonl, DatasetParams, Split, TaskInstance};
use crate::trainer::RunConfig;

use super::{create_dir, default_eval_every, train_and_track, write_tasks, PolicySetup, RunResult, RunStatus};

/// A single run: dataset, initial policy and one [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default)]
    pub dataset: DatasetParams,
    #[serde(default)]
    pub policy: PolicySetup,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    pub run: RunConfig,
}

impl TrainSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: TrainSpec = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
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
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        self.dataset.layout.validate()?;
        self.run.validate()
    }

    pub fn split(&self) -> Result<Split> {
        Ok(generate(&self.dataset)?.split(self.dataset.eval_fraction))
    }
}

/// Trains `spec.run`, writing the run directory under `out` when given.
/// Unlike the multi-seed harness, a failing run is an error.
pub fn train_single(spec: &TrainSpec, out: Option<&Path>) -> Result<(RunResult, TabularPolicy)> {
    spec.validate()?;
    let split = spec.split()?;
    if split.train.is_empty() || split.eval.is_empty() {
        return Err(Error::EmptyDataset("train or eval split is empty".into()));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        fs::write(dir.join("train.toml"), spec.to_toml()?).map_err(|e| Error::io(dir, e))?;
        write_tasks(&dir.join("train.jsonl"), &split.train)?;
        write_tasks(&dir.join("eval.jsonl"), &split.eval)?;
    }
    let initial = spec.policy.build(&spec.dataset)?;
    let (policy, metrics, evals) = train_and_track(&spec.run, initial, &split.train, &split.eval, spec.eval_every, out)?;
    let final_eval = evals.last().map(|e| e.report.clone());
    let result = RunResult {
        paradigm: spec.run.paradigm,
        seed: spec.run.seed,
        status: RunStatus::Completed,
        metrics,
        evals,
        final_eval,
    };
    Ok((result, policy))
}

#[derive(Deserialize)]
struct DatasetTable {
    #[serde(default)]
    dataset: DatasetParams,
}

/// The `[dataset]` table of any config file; other keys are ignored.
pub fn load_dataset_params(path: &Path) -> Result<DatasetParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let t: DatasetTable =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    t.dataset.layout.validate()?;
    Ok(t.dataset)
}

/// Task instances from a JSON Lines file.
pub fn read_tasks(path: &Path) -> Result<Vec<TaskInstance>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(f)).map_err(|e| match e {
        Error::Serde(m) => Error::Serde(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_policy(path: &Path) -> Result<TabularPolicy> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Paradigm;

    const SPEC: &str = r#"
eval_every = 2
[dataset]
n = 60
[run]
paradigm = "rlvr"
steps = 3
batch_size = 4
group_size = 4
"#;

    #[test]
    fn writes_a_run_directory_that_reads_back() {
        let spec = TrainSpec::from_toml(SPEC).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (res, policy) = train_single(&spec, Some(dir.path())).unwrap();
        assert_eq!(res.paradigm, Paradigm::Rlvr);
        assert_eq!(res.metrics.len(), 3);
        // step 0, step 2 and the final step
        assert_eq!(res.evals.iter().map(|e| e.steps_done).collect::<Vec<_>>(), [0, 2, 3]);
        assert_eq!(read_policy(&dir.path().join("final.ckpt")).unwrap(), policy);
        let eval = read_tasks(&dir.path().join("eval.jsonl")).unwrap();
        assert_eq!(eval, spec.split().unwrap().eval);
        let again = TrainSpec::load(&dir.path().join("train.toml")).unwrap();
        assert_eq!(again, spec);
        assert_eq!(load_dataset_params(&dir.path().join("train.toml")).unwrap(), spec.dataset);
    }

    #[test]
    fn missing_run_table_is_a_config_error() {
        assert!(matches!(TrainSpec::from_toml("eval_every = 3"), Err(Error::Config(_))));
        assert!(matches!(read_tasks(Path::new("/nonexistent/x.jsonl")), Err(Error::Io { .. })));
    }
}
