//! Synthetic set-selection tasks with verifiable answers.
//!
//! Each context class owns one fixed answer set, so the answer is learnable
//! from the context alone. Some context classes answer with the empty set
//! ("non-object" instances); a separate family of classes is reserved for
//! the forgetting probe.
//!
//! Answers are written as `<answer> items </answer> <eos>`, optionally
//! preceded by a `<think> ... </think>` block.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{TabularPolicy, TokenSequence, Vocab};
use crate::rng;

pub type ItemSet = BTreeSet<usize>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskFamily {
    PostTrain,
    PretrainHeld,
}

impl TaskFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskFamily::PostTrain => "POST_TRAIN",
            TaskFamily::PretrainHeld => "PRETRAIN_HELD",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInstance {
    pub id: u64,
    pub context: usize,
    pub gt_items: ItemSet,
    pub family: TaskFamily,
}

impl TaskInstance {
    pub fn is_non_object(&self) -> bool {
        self.gt_items.is_empty()
    }
}

/// How context classes are partitioned and which answer each one owns.
///
/// Classes `0..non_object_contexts` answer with the empty set, the last
/// `held_contexts` classes form the `PRETRAIN_HELD` family, and the rest are
/// `POST_TRAIN` object classes. Held classes draw items from the top third of
/// the item range, post-train classes from the rest, so the two families never
/// share an answer item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskLayout {
    pub num_contexts: usize,
    pub num_items: usize,
    pub non_object_contexts: usize,
    pub held_contexts: usize,
}

impl Default for TaskLayout {
    fn default() -> Self {
        Self {
            num_contexts: 8,
            num_items: 6,
            non_object_contexts: 1,
            held_contexts: 2,
        }
    }
}

impl TaskLayout {
    pub fn validate(&self) -> Result<()> {
        if self.num_items < 2 {
            return Err(Error::Config("num_items must be >= 2".into()));
        }
        if self.non_object_contexts + self.held_contexts >= self.num_contexts {
            return Err(Error::Config(format!(
                "layout leaves no post-train object context ({} non-object + {} held >= {} contexts)",
                self.non_object_contexts, self.held_contexts, self.num_contexts
            )));
        }
        Ok(())
    }

    fn held_item_count(&self) -> usize {
        if self.held_contexts == 0 {
            0
        } else {
            self.num_items.div_ceil(3)
        }
    }

    pub fn family(&self, context: usize) -> TaskFamily {
        if context >= self.num_contexts - self.held_contexts {
            TaskFamily::PretrainHeld
        } else {
            TaskFamily::PostTrain
        }
    }

    pub fn non_object_classes(&self) -> Vec<usize> {
        (0..self.non_object_contexts).collect()
    }

    pub fn post_object_classes(&self) -> Vec<usize> {
        (self.non_object_contexts..self.num_contexts - self.held_contexts).collect()
    }

    pub fn held_classes(&self) -> Vec<usize> {
        (self.num_contexts - self.held_contexts..self.num_contexts).collect()
    }

    /// The answer owned by `context`.
    pub fn answer(&self, context: usize) -> ItemSet {
        if context < self.non_object_contexts {
            return ItemSet::new();
        }
        let held = self.held_item_count();
        let post_pool = self.num_items - held;
        match self.family(context) {
            TaskFamily::PostTrain => nth_small_subset(context - self.non_object_contexts, post_pool, 0),
            TaskFamily::PretrainHeld => {
                let j = context - (self.num_contexts - self.held_contexts);
                nth_small_subset(j, held, post_pool)
            }
        }
    }
}

/// Interleaves singletons and pairs of `offset..offset+pool`:
/// `{0}, {0,1}, {1}, {0,2}, {2}, ...`, cycling when exhausted.
fn nth_small_subset(n: usize, pool: usize, offset: usize) -> ItemSet {
    let mut singles: Vec<ItemSet> = (0..pool).map(|a| ItemSet::from([a])).collect();
    let pairs: Vec<ItemSet> = (0..pool)
        .flat_map(|a| (a + 1..pool).map(move |b| ItemSet::from([a, b])))
        .collect();
    let mut seq = Vec::with_capacity(singles.len() + pairs.len());
    let mut pi = pairs.into_iter();
    for s in singles.drain(..) {
        seq.push(s);
        if let Some(p) = pi.next() {
            seq.push(p);
        }
    }
    seq.extend(pi);
    seq[n % seq.len()].iter().map(|x| x + offset).collect()
}

/// Parameters of [`generate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    pub n: usize,
    pub non_object_fraction: f64,
    pub held_fraction: f64,
    pub eval_fraction: f64,
    pub seed: u64,
    pub layout: TaskLayout,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n: 400,
            non_object_fraction: 0.1,
            held_fraction: 0.2,
            eval_fraction: 0.25,
            seed: 0,
            layout: TaskLayout::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<TaskInstance>,
    pub non_object_fraction: f64,
    pub seed: u64,
}

/// Disjoint train / eval partition of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<TaskInstance>,
    pub eval: Vec<TaskInstance>,
}

/// `n` instances under the default layout and held fraction.
pub fn generate_dataset(n: usize, non_object_fraction: f64, seed: u64) -> Result<Dataset> {
    generate(&DatasetParams {
        n,
        non_object_fraction,
        seed,
        ..DatasetParams::default()
    })
}

pub fn generate(params: &DatasetParams) -> Result<Dataset> {
    let layout = params.layout;
    layout.validate()?;
    if params.n == 0 {
        return Err(Error::EmptyDataset("n = 0".into()));
    }
    for (name, f) in [
        ("non_object_fraction", params.non_object_fraction),
        ("held_fraction", params.held_fraction),
        ("eval_fraction", params.eval_fraction),
    ] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("{name} = {f} outside [0, 1]")));
        }
    }
    let n = params.n;
    let n_empty = (n as f64 * params.non_object_fraction).round() as usize;
    let n_held = ((n as f64 * params.held_fraction).round() as usize).min(n - n_empty);
    let n_post = n - n_empty - n_held;
    if n_empty > 0 && layout.non_object_contexts == 0 {
        return Err(Error::Config("non-object instances requested but layout has none".into()));
    }
    if n_held > 0 && layout.held_contexts == 0 {
        return Err(Error::Config("held instances requested but layout has no held contexts".into()));
    }

    let mut r = rng::stream(params.seed, &[rng::tag::DATASET]);
    let mut contexts = Vec::with_capacity(n);
    for (count, classes) in [
        (n_empty, layout.non_object_classes()),
        (n_held, layout.held_classes()),
        (n_post, layout.post_object_classes()),
    ] {
        // cycle through classes so every class is represented, then shuffle
        contexts.extend((0..count).map(|i| classes[i % classes.len()]));
    }
    contexts.shuffle(&mut r);

    let instances = contexts
        .into_iter()
        .enumerate()
        .map(|(i, c)| TaskInstance {
            id: i as u64,
            context: c,
            gt_items: layout.answer(c),
            family: layout.family(c),
        })
        .collect();
    Ok(Dataset {
        instances,
        non_object_fraction: params.non_object_fraction,
        seed: params.seed,
    })
}

impl Dataset {
    /// Stratified split: within each context class, the first
    /// `round(count * eval_fraction)` instances (by id) go to eval.
    pub fn split(&self, eval_fraction: f64) -> Split {
        let mut by_ctx: std::collections::BTreeMap<usize, Vec<&TaskInstance>> = Default::default();
        for t in &self.instances {
            by_ctx.entry(t.context).or_default().push(t);
        }
        let mut eval_ids = BTreeSet::new();
        for group in by_ctx.values_mut() {
            group.sort_by_key(|t| t.id);
            let k = (group.len() as f64 * eval_fraction).round() as usize;
            eval_ids.extend(group.iter().take(k).map(|t| t.id));
        }
        let (eval, train) = self
            .instances
            .iter()
            .cloned()
            .partition(|t| eval_ids.contains(&t.id));
        Split { train, eval }
    }

    pub fn count_non_object(&self) -> usize {
        self.instances.iter().filter(|t| t.is_non_object()).count()
    }
}

pub fn write_jsonl<W: Write>(instances: &[TaskInstance], mut w: W) -> Result<()> {
    for t in instances {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TaskInstance = serde_json::from_str(&line)
            .map_err(|e| Error::Serde(format!("line {}: {e}", lineno + 1)))?;
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemOrder {
    Asc,
    Desc,
}

/// One of the four surface forms of the same answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SerializationVariant {
    pub order: ItemOrder,
    pub use_sep: bool,
}

impl SerializationVariant {
    /// The fixed form used when labels are not aligned.
    pub const CANONICAL: Self = Self {
        order: ItemOrder::Asc,
        use_sep: true,
    };

    /// All variants in tie-break priority order.
    pub const ALL: [Self; 4] = [
        Self::CANONICAL,
        Self { order: ItemOrder::Asc, use_sep: false },
        Self { order: ItemOrder::Desc, use_sep: true },
        Self { order: ItemOrder::Desc, use_sep: false },
    ];

    pub fn rank(&self) -> usize {
        Self::ALL.iter().position(|v| v == self).expect("variant is in ALL")
    }
}

pub fn serialize_label(gt_items: &ItemSet, variant: SerializationVariant, vocab: &Vocab) -> TokenSequence {
    let mut items: Vec<usize> = gt_items.iter().copied().collect();
    if variant.order == ItemOrder::Desc {
        items.reverse();
    }
    let mut ids = vec![Vocab::ANS_OPEN];
    for (i, &k) in items.iter().enumerate() {
        if i > 0 && variant.use_sep {
            ids.push(Vocab::SEP);
        }
        ids.push(vocab.item(k));
    }
    ids.push(Vocab::ANS_CLOSE);
    ids.push(Vocab::EOS);
    TokenSequence::new(ids)
}

/// Prepends an empty `<think></think>` block.
pub fn with_think_block(seq: &TokenSequence) -> TokenSequence {
    let mut ids = vec![Vocab::THINK_OPEN, Vocab::THINK_CLOSE];
    ids.extend_from_slice(seq.ids());
    TokenSequence::new(ids)
}

/// The serialization of `gt_items` the old policy finds most likely.
///
/// Exact logprob ties go to the variant earliest in
/// [`SerializationVariant::ALL`].
pub fn canonicalize_label(gt_items: &ItemSet, old_policy: &TabularPolicy, context: usize) -> Result<TokenSequence> {
    canonicalize_over(gt_items, old_policy, context, &SerializationVariant::ALL)
}

/// Like [`canonicalize_label`], but also considers each variant behind an
/// empty think block, so a policy that reasons first is handed a label in
/// its own format. Ties go to the bare form, then to the earliest variant.
pub fn align_label(gt_items: &ItemSet, old_policy: &TabularPolicy, context: usize) -> Result<TokenSequence> {
    let bare = canonicalize_label(gt_items, old_policy, context)?;
    let wrapped: Vec<TokenSequence> = SerializationVariant::ALL
        .iter()
        .map(|&v| with_think_block(&serialize_label(gt_items, v, &old_policy.vocab())))
        .filter(|s| s.len() <= old_policy.max_len())
        .collect();
    let mut best = (old_policy.logprob(context, &bare)?, bare);
    for seq in wrapped {
        let lp = old_policy.logprob(context, &seq)?;
        if lp > best.0 {
            best = (lp, seq);
        }
    }
    Ok(best.1)
}

/// [`canonicalize_label`] restricted to `variants`, in the order given.
pub fn canonicalize_over(
    gt_items: &ItemSet,
    old_policy: &TabularPolicy,
    context: usize,
    variants: &[SerializationVariant],
) -> Result<TokenSequence> {
    let vocab = old_policy.vocab();
    let mut best: Option<(f64, usize, TokenSequence)> = None;
    for &v in variants {
        let seq = serialize_label(gt_items, v, &vocab);
        let lp = old_policy.logprob(context, &seq)?;
        let better = match &best {
            None => true,
            Some((blp, brank, _)) => lp > *blp || (lp == *blp && v.rank() < *brank),
        };
        if better {
            best = Some((lp, v.rank(), seq));
        }
    }
    best.map(|(_, _, s)| s)
        .ok_or_else(|| Error::Config("no serialization variants given".into()))
}

/// Result of parsing a sequence against the answer grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedAnswer {
    /// Whole sequence matches `[<think> ... </think>] <answer> items </answer> <eos>`.
    pub format_ok: bool,
    /// A well-formed think block precedes the answer.
    pub has_think: bool,
    /// Items between the first `<answer>` and the next `</answer>`; `None`
    /// if no such segment exists.
    pub predicted: Option<ItemSet>,
}

pub fn decode_answer(seq: &TokenSequence, vocab: &Vocab) -> DecodedAnswer {
    let ids = seq.ids();
    let predicted = extract_answer(ids, vocab);
    let (format_ok, has_think) = parse_grammar(ids, vocab);
    DecodedAnswer {
        format_ok,
        has_think: format_ok && has_think,
        predicted,
    }
}

fn extract_answer(ids: &[usize], vocab: &Vocab) -> Option<ItemSet> {
    let open = ids.iter().position(|&t| t == Vocab::ANS_OPEN)?;
    let close = open + 1 + ids[open + 1..].iter().position(|&t| t == Vocab::ANS_CLOSE)?;
    Some(ids[open + 1..close].iter().filter_map(|&t| vocab.item_index(t)).collect())
}

fn parse_grammar(ids: &[usize], vocab: &Vocab) -> (bool, bool) {
    let mut i = 0;
    let mut has_think = false;
    if ids.first() == Some(&Vocab::THINK_OPEN) {
        let Some(close) = ids.iter().position(|&t| t == Vocab::THINK_CLOSE) else {
            return (false, false);
        };
        let body_ok = ids[1..close].iter().all(|&t| t == Vocab::SEP || t == Vocab::EMPTY || vocab.is_item(t));
        if !body_ok {
            return (false, false);
        }
        has_think = true;
        i = close + 1;
    }
    if ids.get(i) != Some(&Vocab::ANS_OPEN) {
        return (false, has_think);
    }
    i += 1;
    // item (SEP? item)*  or nothing
    let mut last_item = false;
    let mut pending_sep = false;
    loop {
        match ids.get(i) {
            Some(&t) if vocab.is_item(t) => {
                last_item = true;
                pending_sep = false;
            }
            Some(&Vocab::SEP) if last_item && !pending_sep => {
                pending_sep = true;
                last_item = false;
            }
            Some(&Vocab::ANS_CLOSE) if !pending_sep => break,
            _ => return (false, has_think),
        }
        i += 1;
    }
    let ok = ids.get(i + 1) == Some(&Vocab::EOS) && i + 2 == ids.len();
    (ok, has_think)
}
