//! Mean token entropy over training for RLVR, ViSuRF and SFT then RLVR.
//!
//! cargo run --release --example entropy_dynamics -- [steps] [seeds]

use policylab::harness::{run_experiment, ExperimentSpec};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut spec = ExperimentSpec::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/entropy.toml").as_ref())?;
    if let Some(n) = args.first() {
        let n: usize = n.parse()?;
        for r in &mut spec.runs {
            r.steps = n;
            r.stage_split = r.stage_split.map(|_| n / 2);
        }
        spec.validate()?;
    }
    if let Some(k) = args.get(1) {
        spec.seeds = (0..k.parse()?).collect();
    }
    let steps = spec.runs[0].steps;
    let report = run_experiment(&spec)?;
    let marks = [0, steps / 20, steps / 10, steps / 4, steps / 2, steps - 1];
    println!("{:<14} {}", "step", marks.map(|m| format!("{:>7}", m + 1)).join(""));
    for p in report.paradigms() {
        let curve = report.entropy_curve(p);
        let row: String = marks.iter().map(|&m| format!("{:>7.3}", curve[m].1)).collect();
        println!("{:<14} {row}", p.as_str());
    }
    Ok(())
}
