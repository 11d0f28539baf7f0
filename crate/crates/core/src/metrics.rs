//! Evaluation metrics.

use std::fmt;

use crate::error::{MuseError, Result};
use crate::numcore::PROB_EPS;

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(MuseError::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(MuseError::EmptyDataset("no scores to evaluate".into()));
    }
    Ok(())
}

/// ROC AUC via the rank-sum statistic with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MuseError::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MuseError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; a tie group spanning ranks lo..=hi gets (lo+hi)/2.
    // Doubled ranks keep the sum an exact integer.
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        pos_rank_sum2 += twice_avg * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = pos_rank_sum2 - p * (p + 1);
    let d = 2 * p * n;
    // Only values in [0.5, 1] are divided out; the lower half is 1 minus
    // such a value, which is exact. This makes auc(y) = 1 - auc(1 - y) hold
    // bit for bit.
    Ok(if 2 * u2 >= d {
        u2 as f64 / d as f64
    } else {
        1.0 - (d - u2) as f64 / d as f64
    })
}

pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Fraction of rows where `score >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= threshold) == (y == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub accuracy: f64,
    pub logloss: f64,
    pub n_positive: usize,
    pub n_negative: usize,
}

impl EvalReport {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let n_positive = labels.iter().filter(|&&l| l == 1).count();
        Ok(EvalReport {
            auc: roc_auc(scores, labels)?,
            accuracy: accuracy(scores, labels, 0.5)?,
            logloss: logloss(scores, labels)?,
            n_positive,
            n_negative: labels.len() - n_positive,
        })
    }
}

impl fmt::Display for EvalReport {
    /// `key=value` lines; floats use the shortest round-trip representation.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "auc={}", self.auc)?;
        writeln!(f, "accuracy={}", self.accuracy)?;
        writeln!(f, "logloss={}", self.logloss)?;
        writeln!(f, "n_positive={}", self.n_positive)?;
        writeln!(f, "n_negative={}", self.n_negative)
    }
}
