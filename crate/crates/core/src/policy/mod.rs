//! Tabular autoregressive categorical policy.
//!
//! The conditional distribution of the next token is a softmax over the sum of
//! two logit rows: one owned by the context class and one shared across all
//! classes. The shared block lets post-training on one family of contexts
//! interfere with another, which is what makes forgetting observable. Both rows
//! receive the same gradient, `onehot(token) - softmax(logits)`.

mod checkpoint;
mod table;
mod vocab;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use table::{ParamTable, TableShape};
pub use vocab::{Token, Vocab};

use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// A (possibly partial) sampled or serialized sequence of token ids.
///
/// When the sequence ended by emitting EOS, the EOS id is the last element of
/// `ids` and `terminated` is true.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
    terminated: bool,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        let terminated = ids.last() == Some(&Vocab::EOS);
        Self { ids, terminated }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    /// Tokens before the terminating EOS.
    pub fn content(&self) -> &[usize] {
        if self.terminated {
            &self.ids[..self.ids.len() - 1]
        } else {
            &self.ids
        }
    }
}

/// Hand-set initial logits in the shared block: a pretrained-model stand-in
/// that already follows the think-then-answer format, fills the think block
/// with a random number of `<empty>` filler tokens, and almost never emits an
/// empty answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FormatPrior {
    /// Logit of each grammatical continuation.
    pub format_logit: f64,
    /// Logit of `</answer>` directly after `<answer>`.
    pub empty_answer_logit: f64,
    /// Logit of another filler token inside the think block, competing with
    /// `</think>` at `format_logit`.
    pub think_logit: f64,
    /// Logit of skipping the think block (`<answer>` right after BOS),
    /// competing with `<think>` at `format_logit`.
    pub direct_answer_logit: f64,
}

impl Default for FormatPrior {
    fn default() -> Self {
        Self {
            format_logit: 6.0,
            empty_answer_logit: -4.0,
            think_logit: 6.0,
            direct_answer_logit: 7.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    vocab: Vocab,
    num_contexts: usize,
    max_len: usize,
    /// Multiplier on the shared block in the combined logits.
    shared_scale: f64,
    theta: ParamTable,
}

impl TabularPolicy {
    /// Uniform policy (all logits zero).
    pub fn new(vocab: Vocab, num_contexts: usize, max_len: usize) -> Self {
        let shape = TableShape {
            blocks: num_contexts + 1,
            max_len,
            vocab_size: vocab.size(),
        };
        Self {
            vocab,
            num_contexts,
            max_len,
            shared_scale: 1.0,
            theta: ParamTable::zeros(shape),
        }
    }

    pub fn from_theta(vocab: Vocab, num_contexts: usize, max_len: usize, theta: ParamTable) -> Result<Self> {
        let p = Self::new(vocab, num_contexts, max_len);
        if theta.shape() != p.theta.shape() {
            return Err(Error::Checkpoint(format!(
                "theta shape {:?} does not match policy shape {:?}",
                theta.shape(),
                p.theta.shape()
            )));
        }
        Ok(Self { theta, ..p })
    }

    /// Uniform policy with `prior` written into the shared block at every position.
    pub fn with_format_prior(vocab: Vocab, num_contexts: usize, max_len: usize, prior: FormatPrior) -> Self {
        let mut p = Self::new(vocab, num_contexts, max_len);
        let b = prior.format_logit;
        let bos = p.bos();
        let shared = p.shared_block();
        for pos in 0..max_len {
            let mut set = |prev: usize, tok: usize, v: f64| p.theta.set(shared, pos, prev, tok, v);
            set(bos, Vocab::THINK_OPEN, b);
            set(bos, Vocab::ANS_OPEN, prior.direct_answer_logit);
            set(Vocab::THINK_OPEN, Vocab::THINK_CLOSE, b);
            set(Vocab::THINK_OPEN, Vocab::EMPTY, prior.think_logit);
            set(Vocab::EMPTY, Vocab::EMPTY, prior.think_logit);
            set(Vocab::EMPTY, Vocab::THINK_CLOSE, b);
            set(Vocab::THINK_CLOSE, Vocab::ANS_OPEN, b);
            set(Vocab::ANS_OPEN, Vocab::ANS_CLOSE, prior.empty_answer_logit);
            set(Vocab::ANS_CLOSE, Vocab::EOS, b);
            for k in 0..vocab.num_items() {
                let item = vocab.item(k);
                set(Vocab::ANS_OPEN, item, b);
                set(Vocab::SEP, item, b);
                set(item, Vocab::SEP, b);
                set(item, Vocab::ANS_CLOSE, b);
            }
        }
        p
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn shared_scale(&self) -> f64 {
        self.shared_scale
    }

    /// Sets the shared-block multiplier `alpha` (logits are
    /// `own + alpha * shared`), rescaling the stored shared block so the
    /// distribution is unchanged. A small `alpha` slows down learning in the
    /// shared block relative to the per-context blocks.
    pub fn set_shared_scale(&mut self, alpha: f64) -> Result<()> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config(format!("shared_scale must be finite and > 0, got {alpha}")));
        }
        let ratio = self.shared_scale / alpha;
        let s = self.theta.shape();
        let first = s.row(self.shared_block(), 0, 0);
        for x in &mut self.theta.as_mut_slice()[first * s.vocab_size..] {
            *x *= ratio;
        }
        self.shared_scale = alpha;
        Ok(())
    }

    /// Index of the block shared by all contexts.
    pub fn shared_block(&self) -> usize {
        self.num_contexts
    }

    /// `prev` slot used at position 0.
    pub fn bos(&self) -> usize {
        self.vocab.size()
    }

    pub fn theta(&self) -> &ParamTable {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut ParamTable {
        &mut self.theta
    }

    pub fn shape(&self) -> TableShape {
        self.theta.shape()
    }

    fn check_context(&self, context: usize) -> Result<()> {
        if context >= self.num_contexts {
            return Err(Error::InvalidSequence(format!(
                "context {context} out of range (C = {})",
                self.num_contexts
            )));
        }
        Ok(())
    }

    pub fn validate(&self, context: usize, seq: &TokenSequence) -> Result<()> {
        self.check_context(context)?;
        let v = self.vocab_size();
        if seq.len() > self.max_len {
            return Err(Error::InvalidSequence(format!(
                "length {} exceeds max_len {}",
                seq.len(),
                self.max_len
            )));
        }
        for (i, &id) in seq.ids().iter().enumerate() {
            if id >= v {
                return Err(Error::InvalidSequence(format!("token id {id} at position {i} >= V = {v}")));
            }
            if id == Vocab::EOS && i + 1 != seq.len() {
                return Err(Error::InvalidSequence(format!("EOS at position {i} is not final")));
            }
        }
        Ok(())
    }

    /// Combined logits of the conditional at `(context, pos, prev)`.
    pub fn logits(&self, context: usize, pos: usize, prev: usize) -> Vec<f64> {
        let s = self.theta.shape();
        let own = self.theta.row(s.row(context, pos, prev));
        let shared = self.theta.row(s.row(self.shared_block(), pos, prev));
        own.iter().zip(shared).map(|(a, b)| a + self.shared_scale * b).collect()
    }

    pub fn probs(&self, context: usize, pos: usize, prev: usize) -> Vec<f64> {
        softmax(&self.logits(context, pos, prev))
    }

    /// Sum of per-step log-probabilities, EOS included when present.
    pub fn logprob(&self, context: usize, seq: &TokenSequence) -> Result<f64> {
        self.validate(context, seq)?;
        let mut prev = self.bos();
        let mut total = 0.0;
        for (pos, &tok) in seq.ids().iter().enumerate() {
            total += log_softmax_at(&self.logits(context, pos, prev), tok);
            prev = tok;
        }
        Ok(total)
    }

    /// Analytic gradient of [`TabularPolicy::logprob`] with respect to theta.
    pub fn grad_logprob(&self, context: usize, seq: &TokenSequence) -> Result<ParamTable> {
        let mut g = ParamTable::zeros(self.theta.shape());
        self.accumulate_grad_logprob(context, seq, 1.0, &mut g)?;
        Ok(g)
    }

    /// `grad += scale * d logprob / d theta`.
    pub fn accumulate_grad_logprob(
        &self,
        context: usize,
        seq: &TokenSequence,
        scale: f64,
        grad: &mut ParamTable,
    ) -> Result<()> {
        self.validate(context, seq)?;
        if scale == 0.0 {
            return Ok(());
        }
        let s = self.theta.shape();
        let mut prev = self.bos();
        for (pos, &tok) in seq.ids().iter().enumerate() {
            let p = self.probs(context, pos, prev);
            for (block, w) in [(context, scale), (self.shared_block(), scale * self.shared_scale)] {
                let row = grad.row_mut(s.row(block, pos, prev));
                for (t, (g, pt)) in row.iter_mut().zip(&p).enumerate() {
                    let onehot = if t == tok { 1.0 } else { 0.0 };
                    *g += w * (onehot - pt);
                }
            }
            prev = tok;
        }
        Ok(())
    }

    /// Autoregressive sample; stops at EOS or `max_len`.
    pub fn sample<R: Rng + ?Sized>(&self, context: usize, rng: &mut R) -> TokenSequence {
        let mut ids = Vec::with_capacity(self.max_len);
        let mut prev = self.bos();
        for pos in 0..self.max_len {
            let p = self.probs(context, pos, prev);
            let tok = sample_categorical(&p, rng.random::<f64>());
            ids.push(tok);
            if tok == Vocab::EOS {
                break;
            }
            prev = tok;
        }
        TokenSequence::new(ids)
    }

    /// Argmax decoding; ties go to the lowest token id.
    pub fn greedy(&self, context: usize) -> TokenSequence {
        let mut ids = Vec::with_capacity(self.max_len);
        let mut prev = self.bos();
        for pos in 0..self.max_len {
            let l = self.logits(context, pos, prev);
            let tok = argmax(&l);
            ids.push(tok);
            if tok == Vocab::EOS {
                break;
            }
            prev = tok;
        }
        TokenSequence::new(ids)
    }

    /// `G` rollouts for one task; rollout `j` draws from the stream keyed by
    /// `(key.seed, ROLLOUT, key.step, key.task_id, j)`.
    pub fn sample_group(&self, context: usize, group_size: usize, key: RolloutKey) -> Result<Vec<TokenSequence>> {
        if group_size < 2 {
            return Err(Error::Config(format!("group size must be >= 2, got {group_size}")));
        }
        self.check_context(context)?;
        Ok((0..group_size)
            .map(|j| {
                let mut r = rng::stream(key.seed, &[rng::tag::ROLLOUT, key.step, key.task_id, j as u64]);
                self.sample(context, &mut r)
            })
            .collect())
    }

    /// Exact entropy (nats) of the conditional at one slot.
    pub fn step_entropy(&self, context: usize, pos: usize, prev: usize) -> f64 {
        entropy(&self.probs(context, pos, prev))
    }

    /// Monte Carlo mean over visited steps of the exact per-step entropy.
    ///
    /// Draws `budget` sequences per context. Returns 0 when no step is visited
    /// (`max_len = 0`).
    pub fn mean_token_entropy<R: Rng + ?Sized>(&self, contexts: &[usize], budget: usize, rng: &mut R) -> Result<f64> {
        if budget == 0 {
            return Err(Error::Config("entropy sample budget must be >= 1".into()));
        }
        let mut sum = 0.0;
        let mut steps = 0usize;
        for &c in contexts {
            self.check_context(c)?;
            for _ in 0..budget {
                let mut prev = self.bos();
                for pos in 0..self.max_len {
                    let p = self.probs(c, pos, prev);
                    sum += entropy(&p);
                    steps += 1;
                    let tok = sample_categorical(&p, rng.random::<f64>());
                    if tok == Vocab::EOS {
                        break;
                    }
                    prev = tok;
                }
            }
        }
        Ok(if steps == 0 { 0.0 } else { sum / steps as f64 })
    }

    /// Gradient-descent update `theta -= lr * grad`.
    pub fn apply_descent(&mut self, grad: &ParamTable, lr: f64) {
        self.theta.add_scaled(grad, -lr);
    }

    pub fn snapshot(&self) -> FrozenPolicy {
        FrozenPolicy(self.clone())
    }
}

/// Key of the rollout stream family for one task at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutKey {
    pub seed: u64,
    pub step: u64,
    pub task_id: u64,
}

/// Immutable deep copy of a policy, used as the old policy.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPolicy(TabularPolicy);

impl Deref for FrozenPolicy {
    type Target = TabularPolicy;
    fn deref(&self) -> &TabularPolicy {
        &self.0
    }
}

/// Replaces the old policy with a copy of the current one.
pub fn sync_old(policy: &TabularPolicy, old: &mut FrozenPolicy) {
    old.0.clone_from(policy);
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn log_softmax_at(logits: &[f64], tok: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits[tok] - lse
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw with `u` in `[0, 1)`.
fn sample_categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn uniform(k: usize, max_len: usize) -> TabularPolicy {
        TabularPolicy::new(Vocab::new(k), 2, max_len)
    }

    #[test]
    fn uniform_logprob_is_length_times_log_v() {
        let p = uniform(5, 12);
        assert_eq!(p.vocab_size(), 12);
        let seq = TokenSequence::new(vec![Vocab::ANS_OPEN, Vocab::ANS_CLOSE, Vocab::EOS]);
        assert!(seq.terminated());
        assert_relative_eq!(p.logprob(0, &seq).unwrap(), -3.0 * 12f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(-3.0 * 12f64.ln(), -7.4547, epsilon = 1e-4);
        let eos_only = TokenSequence::new(vec![Vocab::EOS]);
        assert_relative_eq!(p.logprob(1, &eos_only).unwrap(), -(12f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn peaked_logprob_matches_direct_softmax() {
        let mut p = uniform(5, 12);
        let bos = p.bos();
        let tok = p.vocab().item(2);
        p.theta_mut().set(0, 0, bos, tok, 10.0);
        let seq = TokenSequence::new(vec![tok]);
        // oracle: one logit of 10 against eleven zeros
        let oracle = 10.0 - (10f64.exp() + 11.0).ln();
        assert_relative_eq!(p.logprob(0, &seq).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_sequences() {
        let p = uniform(5, 3);
        let too_long = TokenSequence::new(vec![0, 0, 0, 0]);
        assert!(matches!(p.logprob(0, &too_long), Err(Error::InvalidSequence(_))));
        let bad_id = TokenSequence::new(vec![12]);
        assert!(matches!(p.grad_logprob(0, &bad_id), Err(Error::InvalidSequence(_))));
        let early_eos = TokenSequence::new(vec![Vocab::EOS, 0]);
        assert!(p.logprob(0, &early_eos).is_err());
        assert!(p.logprob(2, &TokenSequence::new(vec![])).is_err());
    }

    #[test]
    fn uniform_gradient_is_onehot_minus_one_over_v() {
        let p = uniform(5, 12);
        let seq = TokenSequence::new(vec![Vocab::ANS_OPEN, p.vocab().item(1), Vocab::EOS]);
        let g = p.grad_logprob(1, &seq).unwrap();
        let v = 12.0;
        let mut prev = p.bos();
        let s = g.shape();
        for (pos, &tok) in seq.ids().iter().enumerate() {
            for block in [1, p.shared_block()] {
                let row = g.row(s.row(block, pos, prev));
                for (t, &x) in row.iter().enumerate() {
                    let want = if t == tok { 1.0 - 1.0 / v } else { -1.0 / v };
                    assert_relative_eq!(x, want, epsilon = 1e-12);
                }
                assert!(row.iter().sum::<f64>().abs() < 1e-12);
            }
            prev = tok;
        }
        // touched rows: 3 positions x {own, shared}
        assert_eq!(g.nonzero_rows().len(), 6);
    }

    #[test]
    fn zero_length_policy_has_zero_gradient() {
        let p = uniform(5, 0);
        let empty = TokenSequence::new(vec![]);
        assert!(p.grad_logprob(0, &empty).unwrap().is_zero());
        let mut r = rng::stream(0, &[]);
        assert!(p.sample(0, &mut r).is_empty());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = TabularPolicy::with_format_prior(Vocab::new(6), 3, 5, FormatPrior::default());
        let s = p.shape();
        for c in 0..3 {
            for pos in 0..5 {
                for prev in 0..s.prev_slots() {
                    let pr = p.probs(c, pos, prev);
                    assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(pr.iter().all(|&x| x > 0.0));
                }
            }
        }
    }

    #[test]
    fn eos_forcing_policy_emits_empty_sequences() {
        let mut p = uniform(5, 12);
        let bos = p.bos();
        p.theta_mut().set(0, 0, bos, Vocab::EOS, 40.0);
        let mut r = rng::stream(9, &[]);
        for _ in 0..10_000 {
            assert_eq!(p.sample(0, &mut r).ids(), &[Vocab::EOS]);
        }
        let group = p
            .sample_group(0, 4, RolloutKey { seed: 1, step: 0, task_id: 3 })
            .unwrap();
        assert!(group.iter().all(|s| s.ids() == [Vocab::EOS]));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let p = TabularPolicy::with_format_prior(Vocab::new(6), 2, 12, FormatPrior::default());
        let a = p.sample(1, &mut rng::stream(5, &[1]));
        let b = p.sample(1, &mut rng::stream(5, &[1]));
        assert_eq!(a, b);
        let key = RolloutKey { seed: 5, step: 2, task_id: 7 };
        assert_eq!(p.sample_group(1, 8, key).unwrap(), p.sample_group(1, 8, key).unwrap());
    }

    #[test]
    fn group_of_one_is_rejected() {
        let p = uniform(5, 4);
        let key = RolloutKey { seed: 0, step: 0, task_id: 0 };
        assert!(matches!(p.sample_group(0, 1, key), Err(Error::Config(_))));
    }

    #[test]
    fn entropy_extremes() {
        let p = uniform(5, 6);
        let mut r = rng::stream(0, &[]);
        let h = p.mean_token_entropy(&[0, 1], 50, &mut r).unwrap();
        assert_relative_eq!(h, 12f64.ln(), epsilon = 1e-12);

        let mut eos = uniform(5, 6);
        let bos = eos.bos();
        eos.theta_mut().set(0, 0, bos, Vocab::EOS, 40.0);
        assert!(eos.mean_token_entropy(&[0], 20, &mut r).unwrap() < 1e-10);

        // two equal top logits, everything else at -40
        let mut two = uniform(5, 1);
        for t in 0..12 {
            let v = if t == 3 || t == 8 { 0.0 } else { -40.0 };
            two.theta_mut().set(0, 0, bos, t, v);
        }
        let h2 = two.mean_token_entropy(&[0], 200, &mut r).unwrap();
        assert!((h2 - 2f64.ln()).abs() < 1e-6);
        assert!(p.mean_token_entropy(&[0], 0, &mut r).is_err());
    }

    #[test]
    fn snapshot_is_a_deep_copy() {
        let mut p = TabularPolicy::with_format_prior(Vocab::new(6), 2, 12, FormatPrior::default());
        let mut old = p.snapshot();
        let seqs: Vec<_> = (0..100).map(|i| p.sample(0, &mut rng::stream(i, &[]))).collect();
        for s in &seqs {
            let ratio = (p.logprob(0, s).unwrap() - old.logprob(0, s).unwrap()).exp();
            assert!((ratio - 1.0).abs() < 1e-12);
        }
        p.theta_mut().as_mut_slice()[0] += 1.0;
        assert_ne!(p.theta(), old.theta());
        sync_old(&p, &mut old);
        assert_eq!(p.theta(), old.theta());
    }

    #[test]
    fn greedy_breaks_ties_to_lowest_id() {
        let p = uniform(5, 3);
        assert_eq!(p.greedy(0).ids(), &[0, 0, 0]);
        assert!(!p.greedy(0).terminated());
    }

    #[test]
    fn shared_scale_keeps_distribution_and_scales_gradient() {
        let mut p = TabularPolicy::with_format_prior(Vocab::new(6), 2, 12, FormatPrior::default());
        let seqs: Vec<_> = (0..50).map(|i| p.sample(1, &mut rng::stream(i, &[]))).collect();
        let before: Vec<f64> = seqs.iter().map(|s| p.logprob(1, s).unwrap()).collect();
        let g1 = p.grad_logprob(1, &seqs[0]).unwrap();
        p.set_shared_scale(0.25).unwrap();
        for (s, lp) in seqs.iter().zip(&before) {
            assert!((p.logprob(1, s).unwrap() - lp).abs() < 1e-9);
        }
        let g = p.grad_logprob(1, &seqs[0]).unwrap();
        let s = p.shape();
        let shared_start = s.row(p.shared_block(), 0, 0) * s.vocab_size;
        for (i, (a, b)) in g.as_slice().iter().zip(g1.as_slice()).enumerate() {
            let want = if i >= shared_start { 0.25 * b } else { *b };
            assert!((a - want).abs() < 1e-12);
        }
        assert!(p.set_shared_scale(0.0).is_err());
        assert!(p.set_shared_scale(f64::NAN).is_err());
    }
}
