//! Train one paradigm from a config file, with a per-step observer.
//!
//! cargo run --release --example train_single -- [config.toml] [steps]

use policylab::harness::TrainSpec;
use policylab::trainer::{evaluate, run_training, Paradigm};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = args
        .first()
        .cloned()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/train_visurf.toml").into());
    let mut spec = TrainSpec::load(path.as_ref())?;
    if let Some(n) = args.get(1) {
        spec.run.steps = n.parse()?;
    }
    let split = spec.split()?;
    let initial = spec.policy.build(&spec.dataset)?;
    println!("{} for {} steps, initial eval iou {:.3}", spec.run.paradigm, spec.run.steps, evaluate(&initial, &split.eval)?.mean_iou);

    let every = (spec.run.steps / 10).max(1);
    let out = run_training(&spec.run, initial, &split.train, |m, policy| {
        if (m.step + 1) % every == 0 {
            let e = evaluate(policy, &split.eval)?;
            println!(
                "step {:>4}  loss {:+.4}  reward {:.3}  entropy {:.3}  eval iou {:.3}  n_acc {:?}",
                m.step + 1,
                m.loss,
                m.mean_rollout_reward.unwrap_or(f64::NAN),
                m.entropy,
                e.mean_iou,
                e.n_acc
            );
        }
        Ok(())
    })?;
    if spec.run.paradigm == Paradigm::Visurf {
        let smoothed: f64 = out.metrics.iter().filter_map(|m| m.smoothed_fraction).sum::<f64>() / out.metrics.len() as f64;
        println!("labels smoothed on average: {:.1}%", 100.0 * smoothed);
    }
    Ok(())
}
