//! Build the pretrained stand-in policy, sample from it, score sequences and
//! round-trip a checkpoint.
//!
//! cargo run --example policy_basics

use policylab::policy::{read_checkpoint, write_checkpoint, FormatPrior, RolloutKey, TabularPolicy, Vocab};
use policylab::rng;

fn main() -> anyhow::Result<()> {
    let vocab = Vocab::new(6);
    let mut policy = TabularPolicy::with_format_prior(vocab, 8, 16, FormatPrior::default());
    policy.set_shared_scale(0.5)?;
    println!("V = {}, theta has {} entries", vocab.size(), policy.theta().as_slice().len());

    let group = policy.sample_group(1, 6, RolloutKey { seed: 7, step: 0, task_id: 0 })?;
    for seq in &group {
        println!("{:>8.3}  {}", policy.logprob(1, seq)?, vocab.render(seq.ids()));
    }
    println!("greedy: {}", vocab.render(policy.greedy(1).ids()));

    let h = policy.mean_token_entropy(&[1, 2, 3], 64, &mut rng::stream(7, &[rng::tag::ENTROPY]))?;
    println!("mean token entropy {h:.4} nats");

    let g = policy.grad_logprob(1, &group[0])?;
    let touched = g.as_slice().iter().filter(|x| **x != 0.0).count();
    println!("grad of logprob touches {touched} entries");

    let mut buf = Vec::new();
    write_checkpoint(&policy, &mut buf)?;
    let back = read_checkpoint(buf.as_slice())?;
    println!("checkpoint: {} bytes, round trip exact: {}", buf.len(), back == policy);
    Ok(())
}
