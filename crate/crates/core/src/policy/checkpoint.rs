//! Textual checkpoint format.
//!
//! ```text
//! policylab-checkpoint 1
//! vocab_size <V>
//! contexts <C>
//! max_len <L>
//! shared_scale <alpha>
//! values <N>
//! <theta[0]>
//! ...
//! ```
//!
//! `theta` has `C + 1` context blocks (the last one shared) and is written
//! row-major over `(block, position, prev, token)` with `prev` in `0..=V`
//! (`V` is begin-of-sequence). Values use 17 significant digits, which
//! round-trips every finite `f64` bit-exactly.

use std::io::{BufRead, Write};

use super::{ParamTable, TabularPolicy, Vocab};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "policylab-checkpoint";

pub fn write_checkpoint<W: Write>(policy: &TabularPolicy, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{MAGIC} {CHECKPOINT_VERSION}")?;
    writeln!(w, "vocab_size {}", policy.vocab_size())?;
    writeln!(w, "contexts {}", policy.num_contexts())?;
    writeln!(w, "max_len {}", policy.max_len())?;
    writeln!(w, "shared_scale {:.16e}", policy.shared_scale())?;
    let data = policy.theta().as_slice();
    writeln!(w, "values {}", data.len())?;
    for x in data {
        writeln!(w, "{x:.16e}")?;
    }
    Ok(())
}

fn header_field<T: std::str::FromStr>(line: Option<std::io::Result<String>>, key: &str) -> Result<T> {
    let line = line
        .ok_or_else(|| Error::Checkpoint(format!("missing `{key}` header")))?
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut parts = line.split_whitespace();
    match (parts.next(), parts.next(), parts.next()) {
        (Some(k), Some(v), None) if k == key => v
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for `{key}`: {v}"))),
        _ => Err(Error::Checkpoint(format!("expected `{key} <n>`, got `{line}`"))),
    }
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<TabularPolicy> {
    let mut lines = r.lines();
    let version: u32 = header_field(lines.next(), MAGIC)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let v: usize = header_field(lines.next(), "vocab_size")?;
    let c = header_field(lines.next(), "contexts")?;
    let l = header_field(lines.next(), "max_len")?;
    let alpha: f64 = header_field(lines.next(), "shared_scale")?;
    let n: usize = header_field(lines.next(), "values")?;
    if v < Vocab::NUM_STRUCTURAL {
        return Err(Error::Checkpoint(format!("vocab_size {v} smaller than the structural token set")));
    }
    let mut policy = TabularPolicy::new(Vocab::new(v - Vocab::NUM_STRUCTURAL), c, l);
    if n != policy.shape().len() {
        return Err(Error::Checkpoint(format!(
            "values {n} does not match shape ({} expected)",
            policy.shape().len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for line in lines {
        let line = line.map_err(|e| Error::Checkpoint(e.to_string()))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let x: f64 = t
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad value `{t}`")))?;
        data.push(x);
    }
    let theta = ParamTable::from_vec(policy.shape(), data)
        .ok_or_else(|| Error::Checkpoint(format!("expected {n} values")))?;
    *policy.theta_mut() = theta;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Checkpoint(format!("bad shared_scale {alpha}")));
    }
    policy.shared_scale = alpha;
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::FormatPrior;

    #[test]
    fn rejects_truncated_and_mismatched_files() {
        let p = TabularPolicy::new(Vocab::new(2), 1, 2);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(9).map(|l| format!("{l}\n")).collect();
        assert!(read_checkpoint(truncated.as_bytes()).is_err());
        let wrong = text.replace("max_len 2", "max_len 3");
        assert!(read_checkpoint(wrong.as_bytes()).is_err());
        let version = text.replace("policylab-checkpoint 1", "policylab-checkpoint 9");
        assert!(read_checkpoint(version.as_bytes()).is_err());
    }

    #[test]
    fn prior_policy_round_trips() {
        let mut p = TabularPolicy::with_format_prior(Vocab::new(6), 8, 12, FormatPrior::default());
        p.set_shared_scale(0.3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), p);
    }
}
