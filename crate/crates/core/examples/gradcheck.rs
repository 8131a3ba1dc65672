//! Run the numerical oracles: finite differences for the log-prob and SFT
//! gradients, the ViSuRF decomposition identity and the brute-force
//! surrogate.
//!
//! cargo run --release --example gradcheck -- [seed]

use policylab::verify::{run_gradcheck, GradcheckConfig};

fn main() -> anyhow::Result<()> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let t = std::time::Instant::now();
    let report = run_gradcheck(&GradcheckConfig { seed, ..GradcheckConfig::default() })?;
    for (kind, pass, total, worst) in report.summary() {
        println!("{:<14} {pass}/{total} passed, worst error {worst:.2e}", kind.as_str());
    }
    println!("all passed: {} ({:.1?})", report.passed(), t.elapsed());
    Ok(())
}
