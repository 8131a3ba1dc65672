//! Fit a held task family first, post-train on the rest, and see how much of
//! the held family each paradigm keeps.
//!
//! cargo run --release --example forgetting -- [steps] [seeds]

use policylab::harness::{forgetting_probe, ExperimentSpec};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut spec = ExperimentSpec::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/forgetting.toml").as_ref())?;
    if let Some(n) = args.first() {
        spec.override_steps(n.parse()?)?;
    }
    if let Some(k) = args.get(1) {
        spec.seeds = (0..k.parse()?).collect();
    }
    let report = forgetting_probe(&spec)?;
    println!("pre-fit: held iou {:.3} after {} steps", report.prefit_score, report.prefit_steps);
    for run in &spec.runs {
        let p = run.paradigm;
        let per_seed: Vec<String> = spec
            .seeds
            .iter()
            .map(|&s| report.retention(p, s).map_or("-".into(), |x| format!("{x:.2}")))
            .collect();
        println!(
            "{:<8} retention {:.3}  per seed [{}]",
            p.as_str(),
            report.mean_retention(p).unwrap_or(f64::NAN),
            per_seed.join(" ")
        );
    }
    Ok(())
}
