//! Overall accuracy, average accuracy and Cohen's kappa.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    /// `confusion[true][pred]`
    pub confusion: Vec<Vec<u64>>,
    /// Percent.
    pub oa: f64,
    /// Percent, averaged over classes present in the ground truth.
    pub aa: f64,
    pub kappa: f64,
    /// Set when chance agreement is 1 and κ falls back to 0 or 1.
    pub degenerate: bool,
}

impl ClassReport {
    pub fn n_classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Class indices are 0-based; the matrix covers `0..=max` over both inputs.
pub fn evaluate(pred: &[usize], truth: &[usize]) -> Result<ClassReport> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let n = pred.iter().chain(truth).max().unwrap() + 1;
    let mut confusion = vec![vec![0u64; n]; n];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let total = pred.len() as f64;
    let diag: u64 = (0..n).map(|c| confusion[c][c]).sum();
    let p_o = diag as f64 / total;

    let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..n).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
    let recalls: Vec<f64> = (0..n)
        .filter(|&c| rows[c] > 0)
        .map(|c| confusion[c][c] as f64 / rows[c] as f64)
        .collect();
    let aa = 100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64;

    let p_e = rows
        .iter()
        .zip(&cols)
        .map(|(&r, &c)| r as f64 * c as f64)
        .sum::<f64>()
        / (total * total);
    let (kappa, degenerate) = if p_e == 1.0 {
        (if diag as f64 == total { 1.0 } else { 0.0 }, true)
    } else {
        ((p_o - p_e) / (1.0 - p_e), false)
    };
    Ok(ClassReport {
        confusion,
        oa: 100.0 * p_o,
        aa,
        kappa,
        degenerate,
    })
}
