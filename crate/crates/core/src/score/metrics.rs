use std::cmp::Ordering;

use super::ScoreError;

fn check_finite(scores: &[f64]) -> Result<(), ScoreError> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(index) => Err(ScoreError::NonFinite { index }),
        None => Ok(()),
    }
}

fn check_len(a: usize, b: usize) -> Result<(), ScoreError> {
    if a != b {
        return Err(ScoreError::LengthMismatch {
            scores: a,
            labels: b,
        });
    }
    Ok(())
}

/// Indices ordered by descending score; equal scores keep input order.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Area under the ROC curve as the Mann-Whitney statistic over
/// (positive, negative) pairs, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, ScoreError> {
    check_len(scores.len(), labels.len())?;
    check_finite(scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ScoreError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks (doubled, to stay integral) over positives.
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank2_sum += mid2;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    let u2 = rank2_sum - n_pos * (n_pos + 1);
    Ok(u2 as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// Size of the top fraction `alpha` of `n` items: `ceil(alpha * n)`, with a
/// small tolerance so that products such as `0.01 * 1000` round to 10.
pub fn top_count(alpha: f64, n: usize) -> usize {
    ((alpha * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// `EF_α = NTB_α / (NTB_t · α)`, the top fraction being the first
/// `ceil(α N)` items by descending score with ties in input order.
pub fn enrichment_factor(scores: &[f64], labels: &[bool], alpha: f64) -> Result<f64, ScoreError> {
    check_len(scores.len(), labels.len())?;
    check_finite(scores)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ScoreError::InvalidAlpha(alpha));
    }
    let total = labels.iter().filter(|&&l| l).count();
    if total == 0 {
        return Err(ScoreError::NoActives);
    }
    let top = top_count(alpha, scores.len());
    let hits = rank_descending(scores)[..top]
        .iter()
        .filter(|&&i| labels[i])
        .count();
    Ok(enrichment_from_counts(hits, total, alpha))
}

pub fn enrichment_from_counts(ntb_alpha: usize, ntb_total: usize, alpha: f64) -> f64 {
    ntb_alpha as f64 / (ntb_total as f64 * alpha)
}

/// Fraction of samples whose top `k_percent` % labels (at least one slot,
/// `ceil(k% · L)`, ties in label order) contain a true label.
pub fn topk_accuracy(
    pred: &[Vec<f64>],
    truth: &[Vec<bool>],
    k_percent: f64,
) -> Result<f64, ScoreError> {
    check_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(ScoreError::EmptyInput);
    }
    let n_labels = pred[0].len();
    if n_labels == 0 {
        return Err(ScoreError::EmptyLabelUniverse);
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(ScoreError::InvalidAlpha(k_percent / 100.0));
    }
    let k = top_count(k_percent / 100.0, n_labels).max(1);
    let mut hits = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != n_labels || t.len() != n_labels {
            return Err(ScoreError::LengthMismatch {
                scores: p.len(),
                labels: t.len(),
            });
        }
        check_finite(p)?;
        if rank_descending(p)[..k].iter().any(|&j| t[j]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pred.len() as f64)
}

/// Linear-interpolation percentile (`q` in [0, 100]) of `values`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64, ScoreError> {
    if values.is_empty() {
        return Err(ScoreError::EmptyInput);
    }
    check_finite(values)?;
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(
            roc_auc(&[3.0, 2.0, 1.0], &[true, false, true]).unwrap(),
            0.5
        );
        assert_eq!(
            roc_auc(&[3.0, 2.0, 1.0], &[true, true, false]).unwrap(),
            1.0
        );
        assert_eq!(roc_auc(&[1.0, 1.0], &[true, false]).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[1.0], &[true]),
            Err(ScoreError::SingleClass)
        ));
        assert_eq!(enrichment_from_counts(5, 10, 0.01), 50.0);
        assert_eq!(top_count(0.01, 1000), 10);
        assert_eq!(top_count(0.01, 50), 1);
        assert!((percentile(&[1.0, 2.0, 3.0, 4.0], 50.0).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn enrichment_with_all_actives_on_top() {
        let mut scores = vec![0.0; 1000];
        let mut labels = vec![false; 1000];
        for i in 0..10 {
            scores[i] = 1.0;
            labels[i] = true;
        }
        assert_eq!(enrichment_factor(&scores, &labels, 0.01).unwrap(), 100.0);
        labels[5..10].iter_mut().for_each(|l| *l = false);
        labels[500..505].iter_mut().for_each(|l| *l = true);
        assert_eq!(enrichment_factor(&scores, &labels, 0.01).unwrap(), 50.0);
    }
}
