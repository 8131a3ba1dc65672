//! Empty-answer instances: RLVR never samples the empty answer and so never
//! learns it, while the injected label teaches it. Prints per-seed outcomes.
//!
//! cargo run --release --example nonobject -- [steps] [seeds]

use policylab::harness::{run_experiment, ExperimentSpec};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut spec = ExperimentSpec::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/nonobject.toml").as_ref())?;
    if let Some(n) = args.first() {
        spec.override_steps(n.parse()?)?;
    }
    if let Some(k) = args.get(1) {
        spec.seeds = (0..k.parse()?).collect();
    }
    let report = run_experiment(&spec)?;
    for s in report.seed_summary() {
        let per_seed: Vec<String> = s
            .n_acc_per_seed
            .iter()
            .map(|(_, x)| x.map_or("-".into(), |v| format!("{v:.2}")))
            .collect();
        println!("{:<8} n_acc per seed [{}]  iou {:.3}", s.paradigm.as_str(), per_seed.join(" "), s.mean_iou_mean);
    }
    Ok(())
}
