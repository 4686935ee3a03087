use super::EvalError;
use crate::numkit::Tensor;

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> f64 {
    if y_true.is_empty() {
        return 0.0;
    }
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    hits as f64 / y_true.len() as f64
}

/// Unweighted mean of per-class F1 over all `n_classes`; a class with
/// precision + recall = 0 scores 0.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> f64 {
    if n_classes == 0 {
        return 0.0;
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = (0..n_classes)
        .map(|c| {
            // 2PR/(P+R) reduces to 2tp / (2tp + fp + fn).
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if tp[c] == 0 {
                0.0
            } else {
                (2 * tp[c]) as f64 / denom as f64
            }
        })
        .sum();
    total / n_classes as f64
}

/// Binary AUC: (concordant + ties / 2) / (positives · negatives).
pub fn auc_binary(positive: &[bool], scores: &[f64]) -> Result<f64, EvalError> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Metric("NaN score".into()));
    }
    let mut neg: Vec<f64> = positive
        .iter()
        .zip(scores)
        .filter(|(p, _)| !**p)
        .map(|(_, &s)| s)
        .collect();
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 || neg.is_empty() {
        return Err(EvalError::UndefinedAuc);
    }
    neg.sort_by(f64::total_cmp);
    // Twice the credited pair count, kept integral.
    let mut twice: u64 = 0;
    for (_, &s) in positive.iter().zip(scores).filter(|(p, _)| **p) {
        let below = neg.partition_point(|&v| v < s);
        let upto = neg.partition_point(|&v| v <= s);
        twice += 2 * below as u64 + (upto - below) as u64;
    }
    Ok((twice as f64 / 2.0) / (n_pos as f64 * neg.len() as f64))
}

/// `probs: n×C`. Two classes use the class-1 column; more use the macro
/// mean of one-vs-rest AUCs over classes present in `y_true`.
pub fn auc(y_true: &[usize], probs: &Tensor<f64>) -> Result<f64, EvalError> {
    let (n, c) = probs.dims2("auc").map_err(|e| EvalError::Metric(e.to_string()))?;
    if n != y_true.len() {
        return Err(EvalError::Metric(format!("{n} score rows for {} labels", y_true.len())));
    }
    let column = |k: usize| -> Vec<f64> { (0..n).map(|i| probs.at2(i, k)).collect() };
    if c == 2 {
        let pos: Vec<bool> = y_true.iter().map(|&y| y == 1).collect();
        return auc_binary(&pos, &column(1));
    }
    let mut present: Vec<usize> = y_true.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(EvalError::UndefinedAuc);
    }
    let mut total = 0.0;
    for &k in &present {
        let pos: Vec<bool> = y_true.iter().map(|&y| y == k).collect();
        total += auc_binary(&pos, &column(k))?;
    }
    Ok(total / present.len() as f64)
}
