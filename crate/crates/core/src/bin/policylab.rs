use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use policylab::harness::{
    emit_plots, forgetting_probe, load_dataset_params, read_policy, read_tasks, run_experiment, train_single,
    ComparisonReport, ExperimentSpec, TrainSpec,
};
use policylab::tasks::{generate, write_jsonl, DatasetParams};
use policylab::trainer::{evaluate, EvalReport};
use policylab::verify::{run_gradcheck, GradcheckConfig};
use policylab::Error;

#[derive(Parser)]
#[command(name = "policylab", version, about = "SFT, RLVR and ViSuRF on tabular policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSON Lines.
    GenData(GenData),
    /// Train a single run.
    Train(Common),
    /// Evaluate a checkpoint on a dataset.
    Eval(Eval),
    /// Run every paradigm over every seed of an experiment.
    Compare(Compare),
    /// Finite-difference and brute-force oracle checks.
    Gradcheck(Gradcheck),
    /// Plot a comparison report.
    Plot(Plot),
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the step budget.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct GenData {
    /// Config file with a `[dataset]` table; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tasks as JSON Lines (as written by gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Also write `eval.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Compare {
    #[command(flatten)]
    common: Common,
    /// Also run the forgetting probe.
    #[arg(long)]
    forgetting: bool,
}

#[derive(Args)]
struct Gradcheck {
    /// TOML file with `trials`, `surrogate_trials` and `seed`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Writes `gradcheck.jsonl` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Plot {
    /// Experiment directory containing `report.json`; plots go to `<out>/plots`.
    #[arg(long)]
    out: PathBuf,
    /// Read the report from here instead.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn category(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or("internal", Error::category)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Plot(a) => plot(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already name their cause
            let mut parts = Vec::new();
            for c in e.chain() {
                parts.push(c.to_string());
                if c.is::<Error>() {
                    break;
                }
            }
            let msg = parts.join(": ").replace('\n', " ");
            eprintln!("error[{}]: {msg}", category(&e));
            ExitCode::FAILURE
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value).map_err(Error::from)?;
    Ok(())
}

fn print_eval(label: &str, r: &EvalReport) {
    let n_acc = r.n_acc.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!("{label:<16} iou {:.4}  n_acc {n_acc}  format {:.3}", r.mean_iou, r.format_rate);
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    let mut params = match &a.config {
        Some(p) => load_dataset_params(p)?,
        None => DatasetParams::default(),
    };
    if let Some(s) = a.seed {
        params.seed = s;
    }
    let data = generate(&params)?;
    let split = data.split(params.eval_fraction);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, tasks) in [("dataset", &data.instances), ("train", &split.train), ("eval", &split.eval)] {
        let path = a.out.join(format!("{name}.jsonl"));
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_jsonl(tasks, BufWriter::new(f))?;
    }
    println!(
        "{} instances ({} non-object), {} train / {} eval -> {}",
        data.instances.len(),
        data.count_non_object(),
        split.train.len(),
        split.eval.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: Common) -> anyhow::Result<()> {
    let mut spec = TrainSpec::load(&a.config)?;
    if let Some(s) = a.seed {
        spec.run.seed = s;
    }
    if let Some(n) = a.steps {
        spec.run.steps = n;
    }
    let out = a.out.unwrap_or_else(|| {
        PathBuf::from("out").join(format!("{}_seed{}", spec.run.paradigm, spec.run.seed))
    });
    let (res, _) = train_single(&spec, Some(&out))?;
    if let (Some(first), Some(last)) = (res.evals.first(), res.evals.last()) {
        print_eval("initial", &first.report);
        print_eval(&format!("after {} steps", last.steps_done), &last.report);
    }
    if let Some(h) = res.final_entropy() {
        println!("final entropy {h:.4}");
    }
    println!("run written to {}", out.display());
    Ok(())
}

fn eval(a: Eval) -> anyhow::Result<()> {
    let policy = read_policy(&a.checkpoint)?;
    let tasks = read_tasks(&a.data)?;
    let report = evaluate(&policy, &tasks)?;
    print_eval("overall", &report);
    for (fam, f) in &report.by_family {
        println!("  {:<14} count {:>4}  iou {:.4}", fam.as_str(), f.count, f.mean_iou);
    }
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(())
}

fn print_comparison(report: &ComparisonReport) {
    print_eval("initial policy", &report.baseline);
    for s in report.seed_summary() {
        let n_acc = match (s.n_acc_mean, s.n_acc_std) {
            (Some(m), Some(sd)) => format!("{m:.3} ± {sd:.3}"),
            _ => "-".into(),
        };
        println!(
            "{:<14} seeds {:>2} (failed {})  iou {:.4} ± {:.4}  n_acc {n_acc}",
            s.paradigm.as_str(),
            s.completed,
            s.failed,
            s.mean_iou_mean,
            s.mean_iou_std
        );
        let per_seed: Vec<String> = s
            .n_acc_per_seed
            .iter()
            .map(|(seed, x)| format!("{seed}:{}", x.map_or("-".into(), |v| format!("{v:.2}"))))
            .collect();
        println!("{:<14} n_acc per seed {}", "", per_seed.join(" "));
    }
}

fn compare(a: Compare) -> anyhow::Result<()> {
    let c = a.common;
    let mut spec = ExperimentSpec::load(&c.config)?;
    if let Some(s) = c.seed {
        spec.override_seed(s);
    }
    if let Some(n) = c.steps {
        spec.override_steps(n)?;
    }
    let out = c
        .out
        .or_else(|| spec.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&spec.name));
    spec.out_dir = Some(out.clone());
    let report = run_experiment(&spec)?;
    print_comparison(&report);
    if let Some(f) = report.runs.iter().find(|r| !r.completed()) {
        eprintln!("warning: {} seed {} failed: {:?}", f.paradigm, f.seed, f.status);
    }
    if a.forgetting {
        let rep = forgetting_probe(&spec)?;
        println!("forgetting probe: pre-fit score {:.3} after {} steps", rep.prefit_score, rep.prefit_steps);
        for p in report.paradigms() {
            let m = rep.mean_retention(p).map_or("-".into(), |x| format!("{x:.3}"));
            println!("{:<14} retention {m}", p.as_str());
        }
    }
    println!("results written to {}", out.display());
    Ok(())
}

fn gradcheck(a: Gradcheck) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => GradcheckConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let report = run_gradcheck(&cfg)?;
    for (kind, pass, total, worst) in report.summary() {
        let tag = if pass == total { "PASS" } else { "FAIL" };
        println!("{tag} {:<14} {pass}/{total} trials  worst error {worst:.3e}", kind.as_str());
    }
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("gradcheck.jsonl");
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        report.write_jsonl(BufWriter::new(f))?;
    }
    if !report.passed() {
        let failed = report.records.iter().filter(|r| !r.pass).count();
        return Err(Error::Oracle(format!("{failed} of {} trials failed", report.records.len())).into());
    }
    Ok(())
}

fn plot(a: Plot) -> anyhow::Result<()> {
    let path = a.report.unwrap_or_else(|| a.out.join("report.json"));
    if !path.exists() {
        bail!(Error::Config(format!("no report at {}; run `compare` first", path.display())));
    }
    let report = ComparisonReport::read_json(&path)?;
    let files = emit_plots(&report, &a.out.join("plots"))?;
    println!("{}", files.entropy_svg.display());
    println!("{}", files.stability_svg.display());
    Ok(())
}
