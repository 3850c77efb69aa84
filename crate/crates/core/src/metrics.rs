//! Offline evaluation metrics.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("AUC needs both positive and negative labels")]
    SingleClass,
    #[error("score {0} outside the open interval (0, 1)")]
    ScoreOutOfRange(f64),
    #[error("no observations")]
    Empty,
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Mann–Whitney with midranks, accumulated in integers
/// (doubled ranks) so the only rounding is the final division.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum over positives of 2 × midrank (1-based).
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start+1 ..= end, midrank × 2 = start + 1 + end.
        let doubled_mid = (start + 1 + end) as u128;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        doubled_rank_sum += doubled_mid * pos_in_group;
        start = end;
    }
    // 2U = 2R − P(P+1)
    let doubled_u = doubled_rank_sum - positives * (positives + 1);
    Ok(doubled_u as f64 / (2 * positives * negatives) as f64)
}

/// Mean negative log-likelihood.
pub fn log_loss(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for (&p, &y) in scores.iter().zip(labels) {
        if !(p > 0.0 && p < 1.0) {
            return Err(MetricError::ScoreOutOfRange(p));
        }
        total -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / scores.len() as f64)
}
