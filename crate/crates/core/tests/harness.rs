use std::fs;

use policylab::harness::{
    emit_plots, read_metric_rows, run_dir, run_experiment, train_single, ExperimentSpec, TrainSpec,
};
use policylab::trainer::StepMetrics;

const SPEC: &str = r#"
name = "it"
seeds = [0, 1]
eval_every = 3

[dataset]
n = 100
non_object_fraction = 0.1

[[runs]]
paradigm = "sft"
steps = 6
batch_size = 4
lr = 0.5

[[runs]]
paradigm = "rlvr"
steps = 6
batch_size = 4
group_size = 4
lr = 0.5

[[runs]]
paradigm = "sft_then_rlvr"
steps = 6
stage_split = 3
batch_size = 4
group_size = 4
lr = 0.5

[[runs]]
paradigm = "visurf"
steps = 6
batch_size = 4
group_size = 4
lr = 0.5
"#;

fn spec_in(dir: &std::path::Path) -> ExperimentSpec {
    let mut s = ExperimentSpec::from_toml(SPEC).unwrap();
    s.out_dir = Some(dir.to_path_buf());
    s
}

#[test]
fn repeated_experiments_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&spec_in(a.path())).unwrap();
    let rb = run_experiment(&spec_in(b.path())).unwrap();
    assert_eq!(ra, rb);
    for run in &ra.runs {
        assert!(run.completed(), "{:?}", run.status);
        for f in ["metrics.jsonl", "evals.jsonl", "final.ckpt"] {
            let x = fs::read(run_dir(a.path(), run.paradigm, run.seed).join(f)).unwrap();
            let y = fs::read(run_dir(b.path(), run.paradigm, run.seed).join(f)).unwrap();
            assert!(x == y, "{} seed {} {f} differs", run.paradigm, run.seed);
        }
    }
    for f in ["report.json", "summary.csv", "train.jsonl", "eval.jsonl"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn every_paradigm_sees_the_same_split_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_in(dir.path());
    let report = run_experiment(&spec).unwrap();
    let split = spec.split().unwrap();
    let train = policylab::harness::read_tasks(&dir.path().join("train.jsonl")).unwrap();
    assert_eq!(train, split.train);
    // every run starts from one initial policy, so step-0 evaluations agree
    for run in &report.runs {
        assert_eq!(run.evals[0].report, report.baseline);
    }
    assert_eq!(report.paradigms().len(), 4);
}

#[test]
fn plot_tables_trace_back_to_metrics_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&spec_in(dir.path())).unwrap();
    let files = emit_plots(&report, &dir.path().join("plots")).unwrap();
    let rows = read_metric_rows(&files.step_metrics_csv).unwrap();
    for run in &report.runs {
        let text = fs::read_to_string(run_dir(dir.path(), run.paradigm, run.seed).join("metrics.jsonl")).unwrap();
        let on_disk: Vec<StepMetrics> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let plotted: Vec<StepMetrics> = rows
            .iter()
            .filter(|r| r.paradigm == run.paradigm && r.seed == run.seed)
            .map(|r| r.metrics())
            .collect();
        assert_eq!(plotted, on_disk);
    }
    // the plotted mean at each step is the seed mean of the logged entropies
    let means = fs::read_to_string(&files.entropy_mean_csv).unwrap();
    assert!(means.lines().count() > 1);
    for (p, curve) in report.paradigms().into_iter().map(|p| (p, report.entropy_curve(p))) {
        for (x, m) in curve {
            let xs: Vec<f64> = rows.iter().filter(|r| r.paradigm == p && r.step == x).map(|r| r.entropy).collect();
            if xs.is_empty() {
                continue;
            }
            let want = xs.iter().sum::<f64>() / xs.len() as f64;
            assert!((m - want).abs() < 1e-12, "{p} step {x}");
        }
    }
}

#[test]
fn single_run_matches_its_experiment_counterpart() {
    let dir = tempfile::tempdir().unwrap();
    let exp = ExperimentSpec::from_toml(SPEC).unwrap();
    let report = run_experiment(&exp).unwrap();
    let visurf = report.runs.iter().find(|r| r.paradigm.as_str() == "visurf" && r.seed == 1).unwrap();
    let single = TrainSpec {
        dataset: exp.dataset,
        policy: exp.policy,
        eval_every: exp.eval_every,
        run: policylab::trainer::RunConfig { seed: 1, ..exp.runs[3].clone() },
    };
    let (res, _) = train_single(&single, Some(dir.path())).unwrap();
    assert_eq!(res.metrics, visurf.metrics);
    assert_eq!(res.evals, visurf.evals);
}
