use crate::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-6;

/// `exp(mean_i KL(p_i || p_mean))` over rows of class probabilities.
pub fn inception_score(class_probs: &[Vec<f64>]) -> Result<f64> {
    let n = class_probs.len();
    if n == 0 {
        return Err(Error::Metric("inception score of an empty set".into()));
    }
    let k = class_probs[0].len();
    for (i, row) in class_probs.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Shape(format!("row {i} has {} classes, expected {k}", row.len())));
        }
        if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::Metric(format!("row {i} has a negative or non-finite probability")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Metric(format!("row {i} sums to {s}, not 1")));
        }
    }
    let marginal: Vec<f64> = (0..k).map(|c| class_probs.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
    let mean_kl = class_probs
        .iter()
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, m)| p * (p / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    Ok(mean_kl.exp())
}
