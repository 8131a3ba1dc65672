use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use policylab::advantage::{advantage_augmented, advantage_grpo};
use policylab::policy::{entropy, FormatPrior, TabularPolicy, TokenSequence, Vocab};
use policylab::reward::{accuracy_reward, score_label, score_rollouts, set_iou, RewardConfig, RewardControls};
use policylab::rng;
use policylab::tasks::{
    align_label, canonicalize_label, canonicalize_over, decode_answer, serialize_label, ItemSet, SerializationVariant,
    TaskFamily, TaskInstance,
};
use policylab::trainer::objective::{batch_loss_and_grad, group_loss_and_grad, GroupMember, ScoredGroup};
use policylab::trainer::{
    prepare_rlvr, prepare_visurf, rlvr_step, run_training, sft_loss_and_grad, visurf_step, LabeledExample, Paradigm,
    RunConfig,
};
use policylab::verify::{brute_force_surrogate, check_decomposition, random_policy, random_task};

fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn item_set(k: usize) -> impl Strategy<Value = ItemSet> {
    prop::collection::btree_set(0..k, 0..=k.min(4))
}

fn rewards(g: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, g)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Logit +40 along `seq` in the own block of `context`, so greedy and
/// sampled outputs are `seq` with probability indistinguishable from 1.
fn force(policy: &mut TabularPolicy, context: usize, seq: &TokenSequence) {
    let mut prev = policy.bos();
    for (pos, &t) in seq.ids().iter().enumerate() {
        policy.theta_mut().set(context, pos, prev, t, 40.0);
        prev = t;
    }
}

// policy

proptest! {
    #[test]
    fn conditionals_are_distributions(seed in any::<u64>(), scale in 0.1..20.0f64) {
        let mut r = rng_from(seed);
        let p = random_policy(Vocab::new(3), 2, 4, scale, &mut r);
        for c in 0..2 {
            for pos in 0..4 {
                for prev in 0..=p.vocab_size() {
                    let probs = p.probs(c, pos, prev);
                    prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(probs.iter().all(|x| *x >= 0.0));
                }
            }
        }
    }

    #[test]
    fn mean_token_entropy_is_bounded(seed in any::<u64>(), scale in 0.0..30.0f64) {
        let mut r = rng_from(seed);
        let p = random_policy(Vocab::new(4), 3, 6, scale, &mut r);
        let h = p.mean_token_entropy(&[0, 1, 2], 8, &mut r).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (p.vocab_size() as f64).ln() + 1e-12);
    }

    #[test]
    fn grad_logprob_rows_sum_to_zero(seed in any::<u64>()) {
        let mut r = rng_from(seed);
        let p = random_policy(Vocab::new(3), 2, 6, 2.0, &mut r);
        let seq = p.sample(1, &mut r);
        let g = p.grad_logprob(1, &seq).unwrap();
        let v = p.vocab_size();
        for row in g.as_slice().chunks(v) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}

#[test]
fn sampling_matches_exp_logprob() {
    // smallest vocabulary the structural tokens allow (V = 7)
    let vocab = Vocab::new(0);
    let mut r = rng_from(11);
    let p = random_policy(vocab, 1, 2, 1.5, &mut r);
    let n = 100_000;
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut s = rng::stream(5, &[]);
    for _ in 0..n {
        *counts.entry(p.sample(0, &mut s).ids().to_vec()).or_default() += 1;
    }
    // enumerate the support: EOS first, or any two tokens
    let v = vocab.size();
    let mut support = vec![vec![policylab::policy::Vocab::EOS]];
    for a in (0..v).filter(|&a| a != Vocab::EOS) {
        for b in 0..v {
            support.push(vec![a, b]);
        }
    }
    let total: f64 = support.iter().map(|s| p.logprob(0, &TokenSequence::new(s.clone())).unwrap().exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let tv: f64 = support
        .iter()
        .map(|s| {
            let want = p.logprob(0, &TokenSequence::new(s.clone())).unwrap().exp();
            let got = *counts.get(s).unwrap_or(&0) as f64 / n as f64;
            (want - got).abs()
        })
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.02, "total variation {tv}");
}

#[test]
fn uniform_single_token_frequencies() {
    let vocab = Vocab::new(5);
    assert_eq!(vocab.size(), 12);
    let p = TabularPolicy::new(vocab, 1, 1);
    let n = 100_000usize;
    let mut counts = vec![0usize; 12];
    let mut s = rng::stream(3, &[]);
    for _ in 0..n {
        counts[p.sample(0, &mut s).ids()[0]] += 1;
    }
    let q = 1.0 / 12.0;
    let sigma = (n as f64 * q * (1.0 - q)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * q).abs() <= 3.0 * sigma, "count {c}");
    }
}

#[test]
fn sampling_does_not_depend_on_thread_count() {
    let d = policylab::tasks::generate_dataset(120, 0.1, 2).unwrap();
    let init = TabularPolicy::with_format_prior(Vocab::new(6), 8, 16, FormatPrior::default());
    let cfg = RunConfig {
        paradigm: Paradigm::Visurf,
        steps: 4,
        batch_size: 8,
        group_size: 4,
        lr: 0.5,
        ..RunConfig::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_training(&cfg, init.clone(), &d.instances, |_, _| Ok(())).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.policy, b.policy);
}

// tasks

proptest! {
    #[test]
    fn serialization_round_trips(gt in item_set(6)) {
        let vocab = Vocab::new(6);
        for v in SerializationVariant::ALL {
            let seq = serialize_label(&gt, v, &vocab);
            let d = decode_answer(&seq, &vocab);
            prop_assert!(d.format_ok);
            prop_assert_eq!(d.predicted, Some(gt.clone()));
            prop_assert!(!seq.ids().contains(&Vocab::THINK_OPEN));
        }
    }

    #[test]
    fn canonical_labels_decode_to_ground_truth(gt in item_set(6), seed in any::<u64>()) {
        let vocab = Vocab::new(6);
        let mut r = rng_from(seed);
        let p = random_policy(vocab, 2, 16, 3.0, &mut r);
        for label in [canonicalize_label(&gt, &p, 1).unwrap(), align_label(&gt, &p, 1).unwrap()] {
            prop_assert_eq!(decode_answer(&label, &vocab).predicted, Some(gt.clone()));
        }
    }

    #[test]
    fn canonicalization_ignores_variant_order(gt in item_set(6), seed in any::<u64>(), perm in Just(SerializationVariant::ALL).prop_shuffle()) {
        let vocab = Vocab::new(6);
        let mut r = rng_from(seed);
        // coarse logits make exact ties common
        let mut p = random_policy(vocab, 1, 12, 1.0, &mut r);
        for x in p.theta_mut().as_mut_slice() {
            *x = x.round();
        }
        let a = canonicalize_over(&gt, &p, 0, &SerializationVariant::ALL).unwrap();
        let b = canonicalize_over(&gt, &p, 0, &perm).unwrap();
        prop_assert_eq!(a, b);
    }
}

// reward

fn task_with(gt: ItemSet) -> TaskInstance {
    TaskInstance {
        id: 3,
        context: 1,
        gt_items: gt,
        family: TaskFamily::PostTrain,
    }
}

proptest! {
    #[test]
    fn totals_in_unit_interval_and_smoothing_caps(gt in item_set(6), seed in any::<u64>(), smooth in any::<bool>(), eliminate in any::<bool>()) {
        let vocab = Vocab::new(6);
        let mut r = rng_from(seed);
        let p = random_policy(vocab, 2, 12, 2.0, &mut r);
        let task = task_with(gt);
        let cfg = RewardConfig { controls: RewardControls { align: true, eliminate, smooth }, ..RewardConfig::default() };
        let rollouts: Vec<TokenSequence> = (0..6).map(|_| p.sample(1, &mut r)).collect();
        let scored = score_rollouts(&rollouts, &task, &cfg, &vocab);
        let totals: Vec<f64> = scored.iter().map(|s| s.total).collect();
        prop_assert!(totals.iter().all(|t| (0.0..=1.0).contains(t)));
        let label = align_label(&task.gt_items, &p, 1).unwrap();
        let lr = score_label(&label, &task, &totals, &cfg, &vocab).unwrap();
        prop_assert!((0.0..=1.0).contains(&lr.total));
        let max = totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lr.smoothed {
            prop_assert!(smooth);
            prop_assert!(lr.total <= max);
            let a = advantage_augmented(&totals, lr.total).unwrap();
            prop_assert!(a.a_label.unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_is_one_iff_exact(gt in item_set(6), pred in item_set(6)) {
        let vocab = Vocab::new(6);
        let seq = serialize_label(&pred, SerializationVariant::CANONICAL, &vocab);
        let acc = accuracy_reward(&seq, &gt, &vocab);
        prop_assert_eq!(acc == 1.0, pred == gt);
        prop_assert_eq!(acc, set_iou(&pred, &gt));
    }
}

// advantage

proptest! {
    #[test]
    fn advantages_are_standardized(rs in rewards(2..=16), ry in 0.0..=1.0f64) {
        for a in [advantage_grpo(&rs).unwrap(), advantage_augmented(&rs, ry).unwrap()] {
            let v = a.values();
            if a.degenerate {
                prop_assert!(v.iter().all(|x| *x == 0.0));
            } else {
                prop_assert!(mean(&v).abs() < 1e-9);
                prop_assert!((pop_std(&v) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shift_and_scale_leave_advantages_unchanged(rs in rewards(2..=16), ry in 0.0..=1.0f64, shift in -5.0..5.0f64, scale in 0.01..100.0f64) {
        let base = advantage_augmented(&rs, ry).unwrap();
        prop_assume!(!base.degenerate && pop_std(&rs) > 1e-3);
        let moved: Vec<f64> = rs.iter().map(|r| r * scale + shift).collect();
        let m = advantage_augmented(&moved, ry * scale + shift).unwrap();
        for (a, b) in base.values().iter().zip(m.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let g = advantage_grpo(&rs).unwrap();
        let gm = advantage_grpo(&moved).unwrap();
        for (a, b) in g.values().iter().zip(gm.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dyadic_rewards_are_exactly_invariant(ks in prop::collection::vec(0u32..=16, 8), ky in 0u32..=16, e in -4i32..=4, shift in -8i32..=8) {
        // rewards k/16 with G = 8: every intermediate is exact in binary
        let rs: Vec<f64> = ks.iter().map(|&k| k as f64 / 16.0).collect();
        let ry = ky as f64 / 16.0;
        let base = advantage_grpo(&rs).unwrap();
        prop_assume!(!base.degenerate);
        let lambda = 2f64.powi(e);
        let scaled: Vec<f64> = rs.iter().map(|r| r * lambda).collect();
        prop_assert_eq!(advantage_grpo(&scaled).unwrap().values(), base.values());
        let shifted: Vec<f64> = rs.iter().map(|r| r + shift as f64).collect();
        prop_assert_eq!(advantage_grpo(&shifted).unwrap().values(), base.values());
        let aug = advantage_augmented(&rs, ry).unwrap();
        prop_assert_eq!(advantage_augmented(&scaled, ry * lambda).unwrap().values(), aug.values());
    }

    #[test]
    fn label_at_rollout_mean_has_zero_advantage(rs in rewards(2..=16)) {
        let a = advantage_augmented(&rs, mean(&rs)).unwrap();
        prop_assert!(a.a_label.unwrap().abs() < 1e-12);
    }

    #[test]
    fn advantages_preserve_reward_order(rs in rewards(2..=16), ry in 0.0..=1.0f64) {
        for a in [advantage_grpo(&rs).unwrap(), advantage_augmented(&rs, ry).unwrap()] {
            if a.degenerate {
                continue;
            }
            for i in 0..rs.len() {
                for j in 0..rs.len() {
                    if rs[i] > rs[j] {
                        prop_assert!(a.a_rollouts[i] > a.a_rollouts[j]);
                    }
                }
            }
        }
    }
}

// trainer

fn small_cfg(paradigm: Paradigm, g: usize) -> RunConfig {
    RunConfig {
        paradigm,
        group_size: g,
        batch_size: 3,
        lr: 0.3,
        ..RunConfig::default()
    }
}

fn random_batch(seed: u64, n: usize) -> (TabularPolicy, Vec<TaskInstance>) {
    let mut r = rng_from(seed);
    let vocab = Vocab::new(3);
    let p = random_policy(vocab, 3, 12, 2.0, &mut r);
    let tasks = (0..n).map(|i| random_task(i as u64, vocab, 3, &mut r)).collect();
    (p, tasks)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn surrogate_is_zero_at_sync(seed in any::<u64>(), g in prop::sample::select(vec![2usize, 4, 8])) {
        let (p, tasks) = random_batch(seed, 3);
        let old = p.snapshot();
        for prepared in [
            prepare_rlvr(&old, &tasks, &small_cfg(Paradigm::Rlvr, g), 0).unwrap(),
            prepare_visurf(&old, &tasks, &small_cfg(Paradigm::Visurf, g), 0).unwrap(),
        ] {
            let (loss, _) = batch_loss_and_grad(&p, &prepared.groups, 0.2).unwrap();
            prop_assert!(loss.abs() < 1e-9);
        }
    }

    #[test]
    fn decomposition_holds_at_sync(seed in any::<u64>(), g in prop::sample::select(vec![2usize, 4, 8])) {
        let (p, tasks) = random_batch(seed, 3);
        let rep = check_decomposition(&p, &tasks, &small_cfg(Paradigm::Visurf, g)).unwrap();
        prop_assert!(rep.pass, "max error {}", rep.max_abs_err);
        prop_assert!(rep.max_abs_err < 1e-9);
    }

    #[test]
    fn zero_label_advantage_collapses_to_scaled_group_gradient(seed in any::<u64>(), g in prop::sample::select(vec![2usize, 4, 8])) {
        let mut r = rng_from(seed);
        let vocab = Vocab::new(3);
        let p = random_policy(vocab, 2, 12, 2.0, &mut r);
        let mut with_label = Vec::new();
        let mut without = Vec::new();
        for c in 0..2 {
            let rollouts: Vec<TokenSequence> = (0..g).map(|_| p.sample(c, &mut r)).collect();
            let rs: Vec<f64> = (0..g).map(|_| r.random_range(0..=4) as f64 / 4.0).collect();
            let adv = advantage_augmented(&rs, mean(&rs)).unwrap();
            prop_assert_eq!(adv.a_label, Some(0.0));
            let members: Vec<GroupMember> = rollouts
                .iter()
                .zip(&adv.a_rollouts)
                .map(|(s, &a)| GroupMember { seq: s.clone(), advantage: a, old_logprob: p.logprob(c, s).unwrap(), is_label: false })
                .collect();
            let label = serialize_label(&ItemSet::from([1]), SerializationVariant::CANONICAL, &vocab);
            let mut lm = members.clone();
            lm.push(GroupMember { old_logprob: p.logprob(c, &label).unwrap(), seq: label, advantage: 0.0, is_label: true });
            with_label.push(ScoredGroup { context: c, members: lm, normalizer: g + 1 });
            without.push(ScoredGroup { context: c, members, normalizer: g });
        }
        let (_, gv) = batch_loss_and_grad(&p, &with_label, 0.2).unwrap();
        let (_, gr) = batch_loss_and_grad(&p, &without, 0.2).unwrap();
        let k = g as f64 / (g + 1) as f64;
        for (a, b) in gv.as_slice().iter().zip(gr.as_slice()) {
            prop_assert!((a - k * b).abs() < 1e-9);
        }
    }

    #[test]
    fn label_only_signal_points_along_sft(seed in any::<u64>(), g in prop::sample::select(vec![2usize, 4, 8])) {
        let mut r = rng_from(seed);
        let vocab = Vocab::new(4);
        let p = random_policy(vocab, 2, 12, 1.5, &mut r);
        let task = TaskInstance { id: 0, context: 1, gt_items: ItemSet::from([2, 3]), family: TaskFamily::PostTrain };
        let cfg = RunConfig {
            group_size: g,
            reward: RewardConfig { w_fmt: 0.0, w_acc: 1.0, controls: RewardControls { align: false, eliminate: true, smooth: true } },
            ..RunConfig::default()
        };
        let old = p.snapshot();
        let prepared = prepare_visurf(&old, std::slice::from_ref(&task), &cfg, seed).unwrap();
        let stats = &prepared.stats[0];
        prop_assume!(stats.rollout_rewards.iter().all(|x| x.total == 0.0));
        let label_reward = stats.label_reward.unwrap().total;
        prop_assert!(label_reward > 0.0);
        let (_, gv) = batch_loss_and_grad(&p, &prepared.groups, cfg.epsilon_clip).unwrap();
        let label = prepared.groups[0].members.iter().find(|m| m.is_label).unwrap().seq.clone();
        let (_, gs) = sft_loss_and_grad(&p, &[LabeledExample { context: 1, label }]).unwrap();
        prop_assert!(gv.dot(&gs) > 0.0);
    }

    #[test]
    fn trainer_loss_matches_brute_force_off_sync(seed in any::<u64>(), g in prop::sample::select(vec![2usize, 4, 8])) {
        let mut r = rng_from(seed);
        let vocab = Vocab::new(3);
        let old = random_policy(vocab, 2, 10, 2.0, &mut r);
        let mut p = old.clone();
        for x in p.theta_mut().as_mut_slice() {
            *x += r.random_range(-0.5..=0.5);
        }
        let seqs: Vec<TokenSequence> = (0..g).map(|_| old.sample(1, &mut r)).collect();
        let advs: Vec<f64> = (0..g).map(|_| r.random_range(-2.0..=2.0)).collect();
        let group = ScoredGroup {
            context: 1,
            members: seqs.iter().zip(&advs).map(|(s, &a)| GroupMember { seq: s.clone(), advantage: a, old_logprob: old.logprob(1, s).unwrap(), is_label: false }).collect(),
            normalizer: g,
        };
        let mut grad = policylab::policy::ParamTable::zeros(p.shape());
        let loss = group_loss_and_grad(&p, &group, 0.2, 1.0, &mut grad).unwrap();
        let brute = brute_force_surrogate(&p, &old, 1, &seqs, &advs, 0.2).unwrap();
        prop_assert!((loss - brute).abs() < 1e-9);
    }

    #[test]
    fn clip_dead_zone_zeroes_the_gradient(seed in any::<u64>(), positive in any::<bool>()) {
        let mut r = rng_from(seed);
        let vocab = Vocab::new(3);
        let old = random_policy(vocab, 1, 8, 1.0, &mut r);
        let seq = old.sample(0, &mut r);
        let mut p = old.clone();
        // push the ratio well outside the clip range in the dead-zone direction
        let first = seq.ids()[0];
        let bos = p.bos();
        let v = p.theta().get(0, 0, bos, first);
        p.theta_mut().set(0, 0, bos, first, v + if positive { 3.0 } else { -3.0 });
        let ratio = (p.logprob(0, &seq).unwrap() - old.logprob(0, &seq).unwrap()).exp();
        let outside = if positive { ratio > 1.2 } else { ratio < 0.8 };
        prop_assert!(outside, "ratio {}", ratio);
        let group = ScoredGroup {
            context: 0,
            members: vec![GroupMember { seq: seq.clone(), advantage: if positive { 1.3 } else { -1.3 }, old_logprob: old.logprob(0, &seq).unwrap(), is_label: false }],
            normalizer: 1,
        };
        let mut grad = policylab::policy::ParamTable::zeros(p.shape());
        group_loss_and_grad(&p, &group, 0.2, 1.0, &mut grad).unwrap();
        prop_assert!(grad.as_slice().iter().all(|x| *x == 0.0));
    }
}

#[test]
fn degenerate_groups_leave_parameters_untouched() {
    let vocab = Vocab::new(3);
    let task = task_with(ItemSet::from([0, 2]));
    // every rollout is the empty sequence; reward 0 across the group
    let mut eos = TabularPolicy::new(vocab, 2, 10);
    let bos = eos.bos();
    eos.theta_mut().set(1, 0, bos, Vocab::EOS, 40.0);
    let before = eos.clone();
    let mut old = eos.snapshot();
    let cfg = small_cfg(Paradigm::Rlvr, 4);
    let rep = rlvr_step(&mut eos, &mut old, std::slice::from_ref(&task), &cfg, 0).unwrap();
    assert_eq!(eos, before);
    assert_eq!(rep.degenerate_fraction, Some(1.0));

    // every rollout equals the label, so label and rollouts tie
    let label = serialize_label(&task.gt_items, SerializationVariant::CANONICAL, &vocab);
    let mut exact = TabularPolicy::new(vocab, 2, 10);
    force(&mut exact, 1, &label);
    let before = exact.clone();
    let mut old = exact.snapshot();
    let cfg = small_cfg(Paradigm::Visurf, 4);
    let rep = visurf_step(&mut exact, &mut old, std::slice::from_ref(&task), &cfg, 0).unwrap();
    assert_eq!(exact, before);
    assert_eq!(rep.degenerate_fraction, Some(1.0));
    assert!(rep.loss.is_finite() && rep.grad_norm == 0.0);
}

#[test]
fn step_entropy_of_two_point_row_is_ln2() {
    let p = [0.5, 0.5, 0.0, 0.0];
    assert!((entropy(&p) - 2f64.ln()).abs() < 1e-15);
}
