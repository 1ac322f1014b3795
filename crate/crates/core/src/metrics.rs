//! Accuracy, expected calibration error, AUROC and uncertainty scores.

use mnp_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{MnpError, Result};

/// Default number of ECE bins.
pub const ECE_BINS: usize = 15;

/// Index of the largest entry; lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_pair(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(MnpError::Contract(format!(
            "predictions {:?} vs labels {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.rows() == 0 {
        return Err(MnpError::Contract("empty prediction set".into()));
    }
    Ok(())
}

/// Fraction of rows where the predicted and true argmax agree.
pub fn accuracy(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair(pred, truth)?;
    let n = pred.rows();
    let hits = (0..n)
        .filter(|&i| argmax(pred.row_slice(i)) == argmax(truth.row_slice(i)))
        .count();
    Ok(hits as f64 / n as f64)
}

/// Bin of a confidence value: bin `i` covers `(i/b, (i+1)/b]`, bin 0 also holds 0.
pub fn ece_bin(confidence: f64, bins: usize) -> usize {
    if confidence <= 0.0 {
        return 0;
    }
    ((confidence * bins as f64).ceil() as usize).clamp(1, bins) - 1
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(pred: &Tensor, truth: &Tensor, bins: usize) -> Result<f64> {
    check_pair(pred, truth)?;
    if bins == 0 {
        return Err(MnpError::Contract("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0.0; bins];
    let mut conf = vec![0.0; bins];
    for i in 0..pred.rows() {
        let row = pred.row_slice(i);
        let k = argmax(row);
        let c = row[k];
        let b = ece_bin(c, bins);
        count[b] += 1;
        conf[b] += c;
        if k == argmax(truth.row_slice(i)) {
            correct[b] += 1.0;
        }
    }
    let n = pred.rows() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let size = count[b] as f64;
        total += size * (correct[b] / size - conf[b] / size).abs();
    }
    Ok(total / n)
}

/// Probability that a random OOD score exceeds a random ID score, ties
/// counting one half. Computed from midranks.
pub fn auroc(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(MnpError::Contract("AUROC needs nonempty ID and OOD scores".into()));
    }
    if scores_id.iter().chain(scores_ood).any(|v| v.is_nan()) {
        return Err(MnpError::Contract("NaN score".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_id
        .iter()
        .map(|&s| (s, false))
        .chain(scores_ood.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_ood = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; the tied block i..=j shares the midrank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_ood += midrank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n_id, n_ood) = (scores_id.len() as f64, scores_ood.len() as f64);
    Ok((rank_sum_ood - n_ood * (n_ood + 1.0) / 2.0) / (n_id * n_ood))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    /// Entropy of the averaged predictive distribution.
    #[default]
    Entropy,
    /// Mean over classes of the across-draw variance of the softmax outputs.
    McVariance,
}

/// Per-row uncertainty. `draws` holds the per-sample softmax outputs and is
/// only needed for [`UncertaintyKind::McVariance`].
pub fn uncertainty(mean_pred: &Tensor, draws: &[Tensor], kind: UncertaintyKind) -> Result<Vec<f64>> {
    match kind {
        UncertaintyKind::Entropy => Ok((0..mean_pred.rows())
            .map(|i| {
                mean_pred
                    .row_slice(i)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .fold(0.0, |acc, &p| acc - p * p.ln())
            })
            .collect()),
        UncertaintyKind::McVariance => {
            if draws.len() < 2 {
                return Err(MnpError::Contract("MC variance needs at least two draws".into()));
            }
            if draws.iter().any(|d| d.shape() != mean_pred.shape()) {
                return Err(MnpError::Contract("draw shapes differ from the prediction".into()));
            }
            let s = draws.len() as f64;
            let (n, k) = (mean_pred.rows(), mean_pred.cols());
            Ok((0..n)
                .map(|i| {
                    let mut total = 0.0;
                    for c in 0..k {
                        let mean = draws.iter().fold(0.0, |a, d| a + d.get(i, c)) / s;
                        let var = draws.iter().fold(0.0, |a, d| a + (d.get(i, c) - mean).powi(2)) / s;
                        total += var;
                    }
                    total / k as f64
                })
                .collect())
        }
    }
}
