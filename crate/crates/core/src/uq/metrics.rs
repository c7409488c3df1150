//! AUROC (Mann–Whitney, ties counted ½) and AUPR (average precision with
//! tied scores grouped into one threshold). Positives are the abnormal
//! samples and are expected to score higher.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Runs of equal scores in descending order as `(positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let idx = descending(scores);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let (mut p, mut n) = (0, 0);
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        groups.push((p, n));
    }
    groups
}

/// Probability that a random positive outscores a random negative.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({} positives, {} negatives)",
            pos, neg
        )));
    }
    // negatives seen so far at strictly higher scores
    let mut neg_above = 0usize;
    let mut wins = 0.0;
    for (p, n) in tie_groups(scores, labels) {
        wins += p as f64 * ((neg - neg_above - n) as f64 + 0.5 * n as f64);
        neg_above += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision: `Σ_k (R_k − R_{k−1}) P_k` over distinct thresholds.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPR needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC needs both classes".into()));
    }
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0, 0);
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Precision–recall points `(recall, precision)`, one per distinct score.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("PR curve needs a positive".into()));
    }
    let (mut tp, mut fp) = (0, 0);
    Ok(tie_groups(scores, labels)
        .into_iter()
        .map(|(p, n)| {
            tp += p;
            fp += n;
            (tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect())
}
