//! Ranking and calibration metrics: AUC, normalized entropy, expected
//! calibration error and observed-to-expected ratios by group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::bce_loss;

fn check_pair(a: &[f64], b: &[f64], what: &'static str) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Empty(what));
    }
    if a.len() != b.len() {
        return Err(Error::Shape {
            what,
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

fn class_counts(labels: &[f64]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&t| t == 1.0).count();
    let neg = labels.iter().filter(|&&t| t == 0.0).count();
    if pos + neg != labels.len() {
        return Err(Error::data("labels must be 0 or 1"));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC: `P(s+ > s-) + P(s+ = s-) / 2`, via average ranks.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(scores, labels, "auc")?;
    let (pos, neg) = class_counts(labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass("auc"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        while end + 1 < idx.len() && scores[idx[end + 1]] == scores[idx[k]] {
            end += 1;
        }
        // ranks k+1 ..= end+1 share their average
        let avg = (k + end + 2) as f64 / 2.0;
        for &i in &idx[k..=end] {
            if labels[i] == 1.0 {
                rank_sum += avg;
            }
        }
        k = end + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Cross-entropy of `preds` relative to the constant base-rate predictor.
pub fn normalized_entropy(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels, "normalized_entropy")?;
    let base = labels.iter().sum::<f64>() / labels.len() as f64;
    if base <= 0.0 || base >= 1.0 {
        return Err(Error::SingleClass("normalized_entropy"));
    }
    let model = bce_loss(preds, labels)?.value;
    let reference = -(base * base.ln() + (1.0 - base) * (-base).ln_1p());
    Ok(model / reference)
}

/// Equal-width binned expected calibration error over `[0, 1]`.
/// A prediction `p` lands in bin `floor(p * bins)`, with `p = 1` in the last.
pub fn ece(preds: &[f64], labels: &[f64], bins: usize) -> Result<f64> {
    check_pair(preds, labels, "ece")?;
    if bins == 0 {
        return Err(Error::config("ece needs at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut sum_p = vec![0.0; bins];
    let mut sum_t = vec![0.0; bins];
    for (&p, &t) in preds.iter().zip(labels) {
        let b = ((p.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        sum_p[b] += p;
        sum_t[b] += t;
    }
    let n = preds.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (sum_p[b] / c - sum_t[b] / c).abs()
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OeEntry {
    pub count: usize,
    pub observed: f64,
    pub expected: f64,
    /// `observed / expected`; absent when nothing was expected.
    pub ratio: Option<f64>,
}

/// Observed positives over summed predictions, per group.
pub fn oe_ratio(preds: &[f64], labels: &[f64], groups: &[String]) -> Result<BTreeMap<String, OeEntry>> {
    check_pair(preds, labels, "oe_ratio")?;
    if groups.len() != preds.len() {
        return Err(Error::Shape {
            what: "oe_ratio groups",
            expected: preds.len(),
            actual: groups.len(),
        });
    }
    let mut out: BTreeMap<String, OeEntry> = BTreeMap::new();
    for ((&p, &t), g) in preds.iter().zip(labels).zip(groups) {
        let e = out.entry(g.clone()).or_insert(OeEntry {
            count: 0,
            observed: 0.0,
            expected: 0.0,
            ratio: None,
        });
        e.count += 1;
        e.observed += t;
        e.expected += p;
    }
    for e in out.values_mut() {
        e.ratio = (e.expected > 0.0).then(|| e.observed / e.expected);
    }
    Ok(out)
}

/// Pairwise ordering agreement with a continuous ground truth: over all
/// pairs with distinct truth values, the fraction ordered the same way by
/// `scores`, ties in score counting one half. Reduces to [`auc`] when the
/// truth is binary.
pub fn ordering_auc(scores: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(scores, truth, "ordering_auc")?;
    // dense ranks of scores for the Fenwick tree
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |s: f64| sorted.partition_point(|v| *v < s);
    let mut tree = vec![0u64; sorted.len() + 1];
    let prefix = |tree: &[u64], mut i: usize| -> u64 {
        let mut s = 0;
        while i > 0 {
            s += tree[i];
            i &= i - 1;
        }
        s
    };

    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| truth[a].total_cmp(&truth[b]));
    let (mut concordant, mut ties, mut pairs) = (0u128, 0u128, 0u128);
    let mut inserted = 0u64;
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        while end + 1 < idx.len() && truth[idx[end + 1]] == truth[idx[k]] {
            end += 1;
        }
        for &i in &idx[k..=end] {
            let r = rank(scores[i]);
            let below = prefix(&tree, r);
            let at_or_below = prefix(&tree, r + 1);
            concordant += below as u128;
            ties += (at_or_below - below) as u128;
            pairs += inserted as u128;
        }
        for &i in &idx[k..=end] {
            let mut j = rank(scores[i]) + 1;
            while j < tree.len() {
                tree[j] += 1;
                j += j & j.wrapping_neg();
            }
            inserted += 1;
        }
        k = end + 1;
    }
    if pairs == 0 {
        return Err(Error::SingleClass("ordering_auc (constant truth)"));
    }
    Ok((concordant as f64 + 0.5 * ties as f64) / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    pub normalized_entropy: Option<f64>,
    pub ece: f64,
    pub oe: BTreeMap<String, OeEntry>,
    /// Ordering agreement with simulator ground truth, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_truth_auc: Option<f64>,
}

pub const DEFAULT_ECE_BINS: usize = 10;

/// All metrics for one set of predictions. AUC and NE are left empty for
/// single-class labels instead of failing.
pub fn evaluate(
    preds: &[f64],
    labels: &[f64],
    groups: &[String],
    latent_truth: Option<&[f64]>,
) -> Result<EvalReport> {
    check_pair(preds, labels, "evaluate")?;
    let (pos, neg) = class_counts(labels)?;
    let both = pos > 0 && neg > 0;
    Ok(EvalReport {
        count: preds.len(),
        positives: pos,
        auc: if both { Some(auc(preds, labels)?) } else { None },
        normalized_entropy: if both { Some(normalized_entropy(preds, labels)?) } else { None },
        ece: ece(preds, labels, DEFAULT_ECE_BINS)?,
        oe: oe_ratio(preds, labels, groups)?,
        latent_truth_auc: match latent_truth {
            Some(t) => Some(ordering_auc(preds, t)?),
            None => None,
        },
    })
}
