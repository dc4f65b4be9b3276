use crate::error::{Error, Result};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// `m[true][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    check_lengths(preds.len(), labels.len())?;
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class id {} out of range for {num_classes} classes",
                p.max(l)
            )));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1. A class with no support and no
/// predictions scores 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    let m = confusion_matrix(preds, labels, num_classes)?;
    let mut total = 0.0;
    for c in 0..num_classes {
        let tp = m[c][c] as f64;
        let fp = (0..num_classes).filter(|&r| r != c).map(|r| m[r][c]).sum::<u64>() as f64;
        let fn_ = (0..num_classes).filter(|&p| p != c).map(|p| m[c][p]).sum::<u64>() as f64;
        let denom = 2.0 * tp + fp + fn_;
        total += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    Ok(total / num_classes as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::InvalidArgument(format!(
            "predictions ({a}) and labels ({b}) must be equal and non-empty"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    /// `None` where the class has no positives or no negatives.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with a defined AUC.
    pub macro_auc: Option<f64>,
}

/// One-vs-rest AUC by the Mann-Whitney rank statistic, ties counted half.
///
/// `scores` is row-major `N × C`.
pub fn roc_auc(scores: &[f64], labels: &[usize], num_classes: usize) -> Result<AucReport> {
    let n = labels.len();
    if scores.len() != n * num_classes || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "scores length {} != {n} samples × {num_classes} classes",
            scores.len()
        )));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let s: Vec<f64> = (0..n).map(|i| scores[i * num_classes + c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let auc = binary_auc(&s, &pos);
        if auc.is_none() {
            log::warn!("class {c} has no positive or no negative samples; AUC excluded from macro average");
        }
        per_class.push(auc);
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(AucReport { per_class, macro_auc })
}

/// `P(score_pos > score_neg) + ½ P(tie)` via average ranks.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum_pos += avg * order[i..j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}
