use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::locparse::LocationLabel;

/// Pixel accuracy, Dice and Jaccard of one binary prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegScores {
    pub accuracy: f64,
    pub dice: f64,
    pub jaccard: f64,
}

/// Scores a binary prediction against a binary ground truth. Empty-vs-empty
/// counts as a perfect Dice and Jaccard.
pub fn seg_metrics(pred: &[u8], gt: &[u8]) -> Result<SegScores> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(v) = pred.iter().chain(gt).find(|&&v| v > 1) {
        return Err(Error::Invalid(format!("mask value {v} is not binary")));
    }
    let (mut inter, mut p, mut g, mut agree) = (0usize, 0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a & b) as usize;
        p += a as usize;
        g += b as usize;
        agree += (a == b) as usize;
    }
    let union = p + g - inter;
    Ok(SegScores {
        accuracy: agree as f64 / pred.len() as f64,
        dice: if p + g == 0 { 1.0 } else { 2.0 * inter as f64 / (p + g) as f64 },
        jaccard: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegionScores {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RegionScores {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        Self {
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMetrics {
    pub regions: [RegionScores; 6],
    pub macro_f1: f64,
    /// Fraction of samples whose six bits all match.
    pub exact_match: f64,
}

/// Per-region precision/recall/F1; a ratio with a zero denominator is 1.
pub fn label_metrics(pred: &[LocationLabel], gt: &[LocationLabel]) -> Result<LabelMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted labels, {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut regions = [RegionScores::default(); 6];
    for (r, slot) in regions.iter_mut().enumerate() {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, g) in pred.iter().zip(gt) {
            match (p.bits()[r], g.bits()[r]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        *slot = RegionScores::from_counts(tp, fp, fn_);
    }
    let exact = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(LabelMetrics {
        macro_f1: regions.iter().map(|r| r.f1).sum::<f64>() / 6.0,
        exact_match: if gt.is_empty() { 1.0 } else { exact as f64 / gt.len() as f64 },
        regions,
    })
}

/// Adjusted Rand index between two partitions. Every distinct value,
/// including negative noise labels, is treated as its own block.
pub fn adjusted_rand_index(a: &[i32], b: &[i32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("partitions of {} and {} items", a.len(), b.len())));
    }
    let n = a.len();
    let pairs = |c: usize| (c * c.saturating_sub(1) / 2) as f64;
    let mut table: HashMap<(i32, i32), usize> = HashMap::new();
    let mut rows: HashMap<i32, usize> = HashMap::new();
    let mut cols: HashMap<i32, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sa: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sb: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if max == expected {
        // Both partitions trivial (all singletons or one block).
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
