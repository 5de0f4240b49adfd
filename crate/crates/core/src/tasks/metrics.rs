use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Macro F1 over every class present in `labels` or `predictions`. A class
/// with zero precision and recall scores 0.
pub fn evaluate_f1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::input("F1 of an empty evaluation set"));
    }
    let classes: BTreeSet<usize> = labels.iter().chain(predictions).copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / classes.len() as f64)
}

/// Difference of means, `mean(better) - mean(baseline)`.
pub fn mean_gap(better: &[f64], baseline: &[f64]) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    mean(better) - mean(baseline)
}
