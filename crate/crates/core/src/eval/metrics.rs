use crate::error::{Error, Result};
use crate::stats::average_ranks;

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Usage(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    Ok((pos, labels.len() - pos))
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC-AUC needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: mean over positives of the precision at that
/// positive's score threshold, tied scores forming one threshold.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = class_counts(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("PR-AUC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_pos = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            group_pos += labels[order[j]] as usize;
            j += 1;
        }
        tp += group_pos;
        seen += j - i;
        ap += group_pos as f64 * tp as f64 / seen as f64;
        i = j;
    }
    Ok(ap / pos as f64)
}
