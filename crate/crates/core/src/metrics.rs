//! Flat, hierarchical, and LCA-restricted evaluation metrics.
//!
//! Hierarchical precision and recall compare ancestor sets: for record i,
//! Anc is the true node plus its proper ancestors (root excluded) and Ânc
//! the same for the prediction; P = Σ|Anc ∩ Ânc| / Σ|Ânc| and
//! R = Σ|Anc ∩ Ânc| / Σ|Anc|, summed over records before dividing. The LCA
//! variants drop strict ancestors of lca(pred, truth) from both sets first,
//! so a deep shared prefix no longer pads the score.
//!
//! Numerators and denominators are exact integer counts; division happens
//! once at the end.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{LabelPath, NodeId, Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("predictions and truths differ in length: {preds} vs {truths}")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("record {record}: truth path has no labels")]
    EmptyTruth { record: usize },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// Exact micro-aggregation counts for one precision/recall pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrfCounts {
    /// Σ |Anc ∩ Ânc|
    pub hit: u64,
    /// Σ |Ânc|
    pub predicted: u64,
    /// Σ |Anc|
    pub truth: u64,
}

impl PrfCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.hit, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.hit, self.truth)
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }
}

/// Full evaluation summary over one prediction set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalResult {
    pub records: usize,
    pub acc: f64,
    pub p_h: f64,
    pub r_h: f64,
    pub f_h: f64,
    pub p_lca: f64,
    pub r_lca: f64,
    pub f_lca: f64,
}

/// Accuracy per hierarchy level: how often the level-k prediction matches
/// the truth, over records labeled at level k.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LevelAccuracy {
    pub level: usize,
    pub correct: u64,
    pub total: u64,
}

impl LevelAccuracy {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.total)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check_lengths(preds: &[LabelPath], truths: &[LabelPath]) -> Result<(), MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    Ok(())
}

/// Fraction of records whose prediction, truncated to the truth's depth,
/// equals the true path exactly.
pub fn flat_accuracy(preds: &[LabelPath], truths: &[LabelPath]) -> Result<f64, MetricsError> {
    check_lengths(preds, truths)?;
    let mut correct = 0u64;
    for (record, (pred, truth)) in preds.iter().zip(truths).enumerate() {
        let depth = truth.filled_depth();
        if depth == 0 {
            return Err(MetricsError::EmptyTruth { record });
        }
        let hit = (1..=depth).all(|lv| pred.at_level(lv) == truth.at_level(lv));
        if hit {
            correct += 1;
        }
    }
    Ok(ratio(correct, preds.len() as u64))
}

/// Non-absent nodes of `path` at levels 1..=depth, existence-checked.
fn entry_set(
    path: &LabelPath,
    depth: usize,
    tax: &Taxonomy,
) -> Result<Vec<NodeId>, MetricsError> {
    let mut out = Vec::with_capacity(depth);
    for lv in 1..=depth {
        if let Some(id) = path.at_level(lv) {
            if !tax.contains(id) {
                return Err(TaxonomyError::UnknownNode(id).into());
            }
            out.push(id);
        }
    }
    Ok(out)
}

fn intersection_size(a: &[NodeId], b: &[NodeId]) -> u64 {
    a.iter().filter(|x| b.contains(x)).count() as u64
}

/// Micro-aggregation counts for the plain hierarchical metrics.
pub fn hierarchical_counts(
    preds: &[LabelPath],
    truths: &[LabelPath],
    tax: &Taxonomy,
) -> Result<PrfCounts, MetricsError> {
    check_lengths(preds, truths)?;
    let mut counts = PrfCounts { hit: 0, predicted: 0, truth: 0 };
    for (record, (pred, truth)) in preds.iter().zip(truths).enumerate() {
        let depth = truth.filled_depth();
        if depth == 0 {
            return Err(MetricsError::EmptyTruth { record });
        }
        let anc = entry_set(truth, depth, tax)?;
        let anc_hat = entry_set(pred, depth, tax)?;
        counts.hit += intersection_size(&anc, &anc_hat);
        counts.predicted += anc_hat.len() as u64;
        counts.truth += anc.len() as u64;
    }
    Ok(counts)
}

pub fn hierarchical_prf(
    preds: &[LabelPath],
    truths: &[LabelPath],
    tax: &Taxonomy,
) -> Result<(f64, f64, f64), MetricsError> {
    let c = hierarchical_counts(preds, truths, tax)?;
    Ok((c.precision(), c.recall(), c.f_measure()))
}

/// Micro-aggregation counts with both ancestor sets restricted to the LCA of
/// prediction and truth and its descendants.
pub fn lca_counts(
    preds: &[LabelPath],
    truths: &[LabelPath],
    tax: &Taxonomy,
) -> Result<PrfCounts, MetricsError> {
    check_lengths(preds, truths)?;
    let mut counts = PrfCounts { hit: 0, predicted: 0, truth: 0 };
    for (record, (pred, truth)) in preds.iter().zip(truths).enumerate() {
        let depth = truth.filled_depth();
        if depth == 0 {
            return Err(MetricsError::EmptyTruth { record });
        }
        let mut anc = entry_set(truth, depth, tax)?;
        let mut anc_hat = entry_set(pred, depth, tax)?;
        let pred_leaf = anc_hat.iter().copied().max_by_key(|&n| tax.level(n).unwrap());
        let truth_leaf = truth.leaf().expect("non-empty truth");
        // A root LCA (or an empty prediction) has no strict ancestors to
        // drop, so the sets pass through unchanged.
        if let Some(pl) = pred_leaf {
            if let Some(l) = tax.lca(pl, truth_leaf)? {
                let cut = tax.level(l)?;
                anc.retain(|&n| tax.level(n).unwrap() >= cut);
                anc_hat.retain(|&n| tax.level(n).unwrap() >= cut);
            }
        }
        counts.hit += intersection_size(&anc, &anc_hat);
        counts.predicted += anc_hat.len() as u64;
        counts.truth += anc.len() as u64;
    }
    Ok(counts)
}

pub fn lca_prf(
    preds: &[LabelPath],
    truths: &[LabelPath],
    tax: &Taxonomy,
) -> Result<(f64, f64, f64), MetricsError> {
    let c = lca_counts(preds, truths, tax)?;
    Ok((c.precision(), c.recall(), c.f_measure()))
}

/// Per-level match rates over records labeled at each level.
pub fn per_level_accuracy(
    preds: &[LabelPath],
    truths: &[LabelPath],
    depth: usize,
) -> Result<Vec<LevelAccuracy>, MetricsError> {
    check_lengths(preds, truths)?;
    let mut out: Vec<LevelAccuracy> = (1..=depth)
        .map(|level| LevelAccuracy { level, correct: 0, total: 0 })
        .collect();
    for (pred, truth) in preds.iter().zip(truths) {
        for lv in 1..=depth.min(truth.filled_depth()) {
            let slot = &mut out[lv - 1];
            slot.total += 1;
            if pred.at_level(lv) == truth.at_level(lv) {
                slot.correct += 1;
            }
        }
    }
    Ok(out)
}

/// All metrics in one pass-shaped call.
pub fn evaluate(
    preds: &[LabelPath],
    truths: &[LabelPath],
    tax: &Taxonomy,
) -> Result<EvalResult, MetricsError> {
    let acc = flat_accuracy(preds, truths)?;
    let h = hierarchical_counts(preds, truths, tax)?;
    let l = lca_counts(preds, truths, tax)?;
    Ok(EvalResult {
        records: preds.len(),
        acc,
        p_h: h.precision(),
        r_h: h.recall(),
        f_h: h.f_measure(),
        p_lca: l.precision(),
        r_lca: l.recall(),
        f_lca: l.f_measure(),
    })
}
