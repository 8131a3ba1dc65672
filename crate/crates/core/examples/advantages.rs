//! Group-relative advantages with and without an injected label, including
//! the degenerate and smoothed cases.
//!
//! cargo run --example advantages

use policylab::advantage::{advantage_augmented, advantage_grpo};

fn show(name: &str, xs: &[f64]) {
    let s: Vec<String> = xs.iter().map(|x| format!("{x:+.4}")).collect();
    println!("{name:<34} [{}]", s.join(", "));
}

fn main() -> anyhow::Result<()> {
    let rewards = [1.0, 0.0, 0.0, 0.0];
    show("one success in four", &advantage_grpo(&rewards)?.a_rollouts);

    let failed = [0.0; 8];
    let plain = advantage_grpo(&failed)?;
    println!("all-failed group degenerate: {}", plain.degenerate);
    let aug = advantage_augmented(&failed, 1.0)?;
    show("all failed + label (rollouts)", &aug.a_rollouts);
    println!("{:<34} {:+.4}", "all failed + label (label)", aug.a_label.unwrap_or(0.0));

    // a smoothed label reward sits exactly at the rollout mean
    let mixed = [0.9, 0.1, 0.55, 0.1];
    let m = mixed.iter().sum::<f64>() / mixed.len() as f64;
    let s = advantage_augmented(&mixed, m)?;
    show("label at the rollout mean", &s.values());
    println!("label advantage is exactly zero: {}", s.a_label == Some(0.0));
    Ok(())
}
