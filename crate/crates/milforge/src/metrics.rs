//! Evaluation metrics: exact-pair AUC, accuracy, confusion matrices, and
//! mean/SD aggregation across folds.

use crate::error::{Error, Result};

/// Area under the ROC curve by exact pair counting. Ties between a
/// positive and a negative score contribute half a concordant pair.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let np = labels.iter().filter(|&&l| l).count();
    let nn = labels.len() - np;
    if np == 0 || nn == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    // sort scores ascending; count, per group of tied scores, how many
    // negatives sit strictly below and how many are tied.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap_or(std::cmp::Ordering::Equal));
    let mut concordant_x2: u128 = 0; // doubled to keep integer arithmetic
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut pos_here: u128 = 0;
        let mut neg_here: u128 = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        concordant_x2 += pos_here * (2 * neg_below + neg_here);
        neg_below += neg_here;
        i = j;
    }
    Ok(concordant_x2 as f64 / (2.0 * np as f64 * nn as f64))
}

/// Macro one-vs-rest AUC over class probability columns.
/// `probs[i][c]` scores sample i for class c.
pub fn macro_ovr_auc(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    if n_classes < 2 {
        return Err(Error::UndefinedMetric("need at least two classes".into()));
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let binary: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += auc(&scores, &binary)?;
    }
    Ok(total / n_classes as f64)
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || predicted.is_empty() {
        return Err(Error::Contract("accuracy: empty or mismatched inputs".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// confusion[true][predicted]
pub fn confusion_matrix(predicted: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if predicted.len() != labels.len() {
        return Err(Error::Contract("confusion: mismatched inputs".into()));
    }
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(Error::Contract(format!("class index out of range: {l}/{p}")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Mean and sample standard deviation (n-1 denominator).
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Aggregation(format!(
            "need at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}
