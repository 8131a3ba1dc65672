use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;
use crate::reward::set_iou;
use crate::tasks::{decode_answer, TaskFamily, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub count: usize,
    pub mean_iou: f64,
}

/// Greedy-decoding scores on an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    /// Mean set IoU of the decoded answers (0 for unparseable outputs).
    pub mean_iou: f64,
    /// Fraction of non-object instances answered with a well-formed empty
    /// answer; `None` when the set has none.
    pub n_acc: Option<f64>,
    /// Fraction of outputs that are grammatical.
    pub format_rate: f64,
    pub by_family: BTreeMap<TaskFamily, FamilyReport>,
}

/// Scores the greedy answer of `policy` on every instance.
pub fn evaluate(policy: &TabularPolicy, eval_set: &[TaskInstance]) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::EmptyDataset("evaluation set is empty".into()));
    }
    let vocab = policy.vocab();
    let mut decoded = BTreeMap::new();
    let mut iou_sum = 0.0;
    let mut formatted = 0usize;
    let (mut empty_total, mut empty_hit) = (0usize, 0usize);
    let mut fam: BTreeMap<TaskFamily, (usize, f64)> = BTreeMap::new();
    for t in eval_set {
        if t.context >= policy.num_contexts() {
            return Err(Error::Config(format!("task {} has context {} out of range", t.id, t.context)));
        }
        let d = decoded
            .entry(t.context)
            .or_insert_with(|| decode_answer(&policy.greedy(t.context), &vocab));
        let iou = d.predicted.as_ref().map_or(0.0, |p| set_iou(p, &t.gt_items));
        iou_sum += iou;
        formatted += usize::from(d.format_ok);
        if t.is_non_object() {
            empty_total += 1;
            empty_hit += usize::from(d.format_ok && d.predicted.as_ref().is_some_and(|p| p.is_empty()));
        }
        let e = fam.entry(t.family).or_default();
        e.0 += 1;
        e.1 += iou;
    }
    let n = eval_set.len() as f64;
    Ok(EvalReport {
        count: eval_set.len(),
        mean_iou: iou_sum / n,
        n_acc: (empty_total > 0).then(|| empty_hit as f64 / empty_total as f64),
        format_rate: formatted as f64 / n,
        by_family: fam
            .into_iter()
            .map(|(k, (count, s))| (k, FamilyReport { count, mean_iou: s / count as f64 }))
            .collect(),
    })
}
