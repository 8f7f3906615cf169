use crate::error::{Error, Result};

/// Area under the ROC curve as the Mann-Whitney statistic, by average ranks.
///
/// Tied scores earn half credit per positive-negative pair.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("roc_auc: {} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("roc_auc: NaN score"));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

pub fn gini(auc: f64) -> f64 {
    2.0 * auc - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1], &[true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1], &[false, true, false]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_error() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
        assert!(roc_auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini(0.5), 0.0);
        assert_eq!(gini(1.0), 1.0);
        assert!((gini(0.791) - 0.582).abs() < 1e-12);
    }
}
