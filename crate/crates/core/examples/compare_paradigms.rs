//! All four paradigms over a few seeds on one dataset, written to disk and
//! plotted.
//!
//! cargo run --release --example compare_paradigms -- [out_dir]

use std::path::PathBuf;

use policylab::harness::{emit_plots, run_experiment, ExperimentSpec};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("policylab_compare"));
    let mut spec = ExperimentSpec::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml").as_ref())?;
    spec.override_steps(200)?;
    spec.out_dir = Some(out.clone());
    let report = run_experiment(&spec)?;
    println!("initial policy iou {:.3}", report.baseline.mean_iou);
    for s in report.seed_summary() {
        println!(
            "{:<14} iou {:.3} ± {:.3}  n_acc {:?}",
            s.paradigm.as_str(),
            s.mean_iou_mean,
            s.mean_iou_std,
            s.n_acc_mean
        );
    }
    let files = emit_plots(&report, &out.join("plots"))?;
    println!("plots: {} {}", files.entropy_svg.display(), files.stability_svg.display());
    Ok(())
}
