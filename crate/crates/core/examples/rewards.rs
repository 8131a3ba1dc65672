//! Score a group of rollouts and the injected label under each combination
//! of the label reward controls.
//!
//! cargo run --example rewards

use policylab::policy::{FormatPrior, RolloutKey, TabularPolicy, Vocab};
use policylab::reward::{score_label, score_rollouts, RewardConfig, RewardControls};
use policylab::tasks::{serialize_label, with_think_block, DatasetParams, SerializationVariant, TaskInstance};

fn main() -> anyhow::Result<()> {
    let layout = DatasetParams::default().layout;
    let vocab = Vocab::new(layout.num_items);
    let policy = TabularPolicy::with_format_prior(vocab, layout.num_contexts, 16, FormatPrior::default());
    let task = TaskInstance {
        id: 0,
        context: 2,
        gt_items: layout.answer(2),
        family: layout.family(2),
    };
    let cfg = RewardConfig::default();
    let rollouts = policy.sample_group(task.context, 8, RolloutKey { seed: 1, step: 0, task_id: 0 })?;
    let scored = score_rollouts(&rollouts, &task, &cfg, &vocab);
    for (seq, r) in rollouts.iter().zip(&scored) {
        println!("{:.3} (fmt {} acc {:.2})  {}", r.total, r.format_component, r.accuracy_component, vocab.render(seq.ids()));
    }
    let totals: Vec<f64> = scored.iter().map(|r| r.total).collect();

    let bare = serialize_label(&task.gt_items, SerializationVariant::CANONICAL, &vocab);
    let wrapped = with_think_block(&bare);
    println!("\nlabel rewards (eliminate, smooth):");
    for label in [&bare, &wrapped] {
        for (eliminate, smooth) in [(false, false), (true, false), (false, true), (true, true)] {
            let cfg = RewardConfig {
                controls: RewardControls { align: false, eliminate, smooth },
                ..cfg
            };
            let r = score_label(label, &task, &totals, &cfg, &vocab)?;
            println!(
                "  {:<48} ({eliminate:>5}, {smooth:>5}) -> {:.3}{}",
                vocab.render(label.ids()),
                r.total,
                if r.smoothed { " smoothed" } else { "" }
            );
        }
    }
    Ok(())
}
