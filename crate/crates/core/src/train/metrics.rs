use std::fmt::Write as _;

use connex_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Class per row of `[n, 2]` logits: the larger sigmoid-transformed logit,
/// with exact ties going to class 0. The sigmoid is strictly increasing,
/// so the logits are compared directly; comparing rounded sigmoid values
/// would tie every pair of saturated logits.
pub fn predict(logits: &Tensor) -> Vec<u8> {
    let k = logits.last_dim();
    logits
        .values()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

/// Accuracy, precision and F1 of the positive class, as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub f1: f64,
}

pub fn metrics(predictions: &[u8], labels: &[u8]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(CoreError::Parameter(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(CoreError::Parameter("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        correct += usize::from(p == l);
        match (p, l) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        accuracy: ratio(correct, labels.len()),
        precision,
        f1,
    })
}

/// Mean and standard deviation over folds, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub config: String,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub precision_mean: f64,
    pub precision_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

impl MetricsRow {
    /// Summarizes per-fold metrics; the standard deviation is the
    /// population one (divides by the number of folds).
    pub fn from_folds(config: impl Into<String>, folds: &[Metrics]) -> Result<Self> {
        if folds.is_empty() {
            return Err(CoreError::Parameter("no folds to summarize".into()));
        }
        let stat = |f: &dyn Fn(&Metrics) -> f64| {
            let v: Vec<f64> = folds.iter().map(|m| 100.0 * f(m)).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (accuracy_mean, accuracy_std) = stat(&|m| m.accuracy);
        let (precision_mean, precision_std) = stat(&|m| m.precision);
        let (f1_mean, f1_std) = stat(&|m| m.f1);
        Ok(Self {
            config: config.into(),
            accuracy_mean,
            accuracy_std,
            precision_mean,
            precision_std,
            f1_mean,
            f1_std,
        })
    }
}

pub const RESULTS_HEADER: &str = "config,accuracy_mean,accuracy_std,precision_mean,precision_std,f1_mean,f1_std";

/// Results table with two decimals per value.
pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}",
            r.config, r.accuracy_mean, r.accuracy_std, r.precision_mean, r.precision_std, r.f1_mean, r.f1_std
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion_matrix() {
        let m = metrics(&[1, 0, 0, 1], &[1, 0, 1, 1]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.precision, 1.0);
        assert!((m.f1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_degenerate_classifiers() {
        let l = [0, 1, 1, 0, 1];
        assert_eq!(
            metrics(&l, &l).unwrap(),
            Metrics {
                accuracy: 1.0,
                precision: 1.0,
                f1: 1.0
            }
        );
        let m = metrics(&[0; 5], &l).unwrap();
        assert_eq!((m.precision, m.f1), (0.0, 0.0));
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn predictions_follow_argmax_with_ties_to_zero() {
        let z = Tensor::from_rows(&[vec![2.0, -1.0], vec![0.3, 0.3], vec![-5.0, 4.0]]);
        assert_eq!(predict(&z), vec![0, 0, 1]);
    }

    #[test]
    fn rows_use_population_std_and_two_decimals() {
        let f = |a| Metrics {
            accuracy: a,
            precision: 0.5,
            f1: 0.5,
        };
        let row = MetricsRow::from_folds("x", &[f(0.8), f(0.9)]).unwrap();
        assert!((row.accuracy_mean - 85.0).abs() < 1e-12);
        assert!((row.accuracy_std - 5.0).abs() < 1e-12);
        let csv = rows_to_csv(&[row]);
        assert_eq!(csv.lines().nth(1).unwrap(), "x,85.00,5.00,50.00,0.00,50.00,0.00");
    }
}
