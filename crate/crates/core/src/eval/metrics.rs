use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::bce_loss;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub auc: f64,
    pub logloss: f64,
    pub n_samples: usize,
}

/// ROC AUC via the Mann-Whitney rank sum; tied scores share their average
/// rank, which credits positive/negative ties with one half.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tie ranks integral.
    let mut rank_sum_x2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start..end (1-based start+1 ..= end); doubled average rank.
        let avg_x2 = (start + 1 + end) as u128;
        let pos_in_tie = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u128;
        rank_sum_x2 += avg_x2 * pos_in_tie;
        start = end;
    }
    let p = positives as u128;
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Mean binary cross-entropy of clamped probabilities.
pub fn logloss(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("logloss of an empty set".into()));
    }
    let total: f64 = labels
        .iter()
        .zip(scores)
        .map(|(&y, &p)| bce_loss(p, f64::from(y)))
        .sum();
    Ok(total / labels.len() as f64)
}

pub fn metric_pair(labels: &[u8], scores: &[f64]) -> Result<MetricPair> {
    Ok(MetricPair {
        auc: auc(labels, scores)?,
        logloss: logloss(labels, scores)?,
        n_samples: labels.len(),
    })
}
