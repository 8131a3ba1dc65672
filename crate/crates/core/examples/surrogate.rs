//! The clipped surrogate term by term: values and slopes on both sides of
//! the clip range, for positive and negative advantages.
//!
//! cargo run --example surrogate

use policylab::trainer::objective::{clipped_term, clipped_term_slope};

fn main() {
    let eps = 0.2;
    println!("{:>6} {:>6} {:>9} {:>7}", "ratio", "adv", "term", "slope");
    for adv in [1.0, -1.0] {
        for ratio in [0.6, 0.8, 0.9, 1.0, 1.1, 1.2, 1.4] {
            println!(
                "{ratio:>6.2} {adv:>+6.1} {:>+9.4} {:>+7.3}",
                clipped_term(ratio, adv, eps),
                clipped_term_slope(ratio, adv, eps)
            );
        }
    }
}
