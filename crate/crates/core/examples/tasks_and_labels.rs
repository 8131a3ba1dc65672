//! Generate the synthetic task mixture and look at the label forms a policy
//! would be trained on.
//!
//! cargo run --example tasks_and_labels

use policylab::policy::{FormatPrior, TabularPolicy, Vocab};
use policylab::tasks::{
    align_label, canonicalize_label, decode_answer, generate, serialize_label, DatasetParams, SerializationVariant,
};

fn main() -> anyhow::Result<()> {
    let params = DatasetParams::default();
    let data = generate(&params)?;
    let split = data.split(params.eval_fraction);
    println!(
        "{} tasks, {} non-object, {} train / {} eval",
        data.instances.len(),
        data.count_non_object(),
        split.train.len(),
        split.eval.len()
    );
    for c in 0..params.layout.num_contexts {
        println!("context {c}: {:?} answer {:?}", params.layout.family(c), params.layout.answer(c));
    }

    let vocab = Vocab::new(params.layout.num_items);
    let task = split.train.iter().find(|t| t.gt_items.len() == 2).expect("a two-item task");
    println!("\ntask {} (context {}), gt {:?}", task.id, task.context, task.gt_items);
    for v in SerializationVariant::ALL {
        println!("  {v:?}: {}", vocab.render(serialize_label(&task.gt_items, v, &vocab).ids()));
    }

    let policy = TabularPolicy::with_format_prior(vocab, params.layout.num_contexts, 16, FormatPrior::default());
    let sft = canonicalize_label(&task.gt_items, &policy, task.context)?;
    let injected = align_label(&task.gt_items, &policy, task.context)?;
    println!("SFT label:      {}", vocab.render(sft.ids()));
    println!("injected label: {}", vocab.render(injected.ids()));

    let sample = policy.greedy(task.context);
    let d = decode_answer(&sample, &vocab);
    println!("greedy output {} -> format_ok {}, predicted {:?}", vocab.render(sample.ids()), d.format_ok, d.predicted);
    Ok(())
}
