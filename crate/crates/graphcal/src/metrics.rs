//! Calibration and accuracy measurement: ECE with configurable bins,
//! reliability-diagram data, confidence histograms, NLL, accuracy.
//!
//! Bins are half-open ((m-1)/M, m/M] with confidence 0 assigned to the first
//! bin, so a confidence of exactly 1.0 lands in the top bin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cross_entropy, DenseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub n_bins: usize,
    pub bins: Vec<BinStat>,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramData {
    pub bin_edges: Vec<f64>,
    pub density_correct: Vec<f64>,
    pub density_incorrect: Vec<f64>,
}

#[inline]
fn bin_index(confidence: f64, n_bins: usize) -> usize {
    if confidence <= 0.0 {
        return 0;
    }
    let idx = (confidence * n_bins as f64).ceil() as usize;
    idx.saturating_sub(1).min(n_bins - 1)
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<EceReport> {
    if confidences.is_empty() {
        return Err(Error::InvalidInput("ece over empty input".into()));
    }
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} confidences vs {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    if n_bins == 0 {
        return Err(Error::InvalidInput("ece needs at least one bin".into()));
    }
    if let Some(&p) = confidences.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!(
            "confidence {p} outside [0, 1]"
        )));
    }
    let mut counts = vec![0usize; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut conf_sums = vec![0.0f64; n_bins];
    for (&p, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(p, n_bins);
        counts[b] += 1;
        conf_sums[b] += p;
        if ok {
            hits[b] += 1;
        }
    }
    let total = confidences.len() as f64;
    let mut bins = Vec::with_capacity(n_bins);
    let mut total_ece = 0.0;
    for b in 0..n_bins {
        let (acc, conf) = if counts[b] > 0 {
            (
                hits[b] as f64 / counts[b] as f64,
                conf_sums[b] / counts[b] as f64,
            )
        } else {
            (0.0, 0.0)
        };
        if counts[b] > 0 {
            total_ece += counts[b] as f64 / total * (acc - conf).abs();
        }
        bins.push(BinStat {
            count: counts[b],
            accuracy: acc,
            mean_confidence: conf,
        });
    }
    Ok(EceReport {
        n_bins,
        bins,
        ece: total_ece,
    })
}

/// Fraction of correct predictions over the mask.
pub fn accuracy(predicted: &[usize], labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::InvalidInput("accuracy over empty mask".into()));
    }
    let correct = mask.iter().filter(|&&v| predicted[v] == labels[v]).count();
    Ok(correct as f64 / mask.len() as f64)
}

/// Per-bin (low, high, count, mean confidence, accuracy) rows for plotting.
pub fn reliability_data(
    confidences: &[f64],
    correct: &[bool],
    n_bins: usize,
) -> Result<Vec<(f64, f64, usize, f64, f64)>> {
    let report = ece(confidences, correct, n_bins)?;
    let width = 1.0 / n_bins as f64;
    Ok(report
        .bins
        .iter()
        .enumerate()
        .map(|(b, stat)| {
            (
                b as f64 * width,
                (b + 1) as f64 * width,
                stat.count,
                stat.mean_confidence,
                stat.accuracy,
            )
        })
        .collect())
}

/// Mean negative log-likelihood; shares the clamping of `cross_entropy`.
pub fn nll(probs: &DenseMatrix, labels: &[usize], mask: &[usize]) -> Result<f64> {
    cross_entropy(probs, labels, mask).map(|(loss, _)| loss)
}

/// Separate normalized histograms for correct and incorrect predictions.
/// Each density integrates to its subset's fraction of all nodes.
pub fn confidence_histogram(
    confidences: &[f64],
    correct: &[bool],
    n_bins: usize,
) -> Result<HistogramData> {
    if n_bins == 0 {
        return Err(Error::InvalidInput("histogram needs at least one bin".into()));
    }
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} confidences vs {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    let width = 1.0 / n_bins as f64;
    let total = confidences.len() as f64;
    let mut density_correct = vec![0.0; n_bins];
    let mut density_incorrect = vec![0.0; n_bins];
    for (&p, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(p, n_bins);
        if ok {
            density_correct[b] += 1.0;
        } else {
            density_incorrect[b] += 1.0;
        }
    }
    for v in density_correct.iter_mut().chain(density_incorrect.iter_mut()) {
        *v /= total * width;
    }
    let bin_edges = (0..=n_bins).map(|b| b as f64 * width).collect();
    Ok(HistogramData {
        bin_edges,
        density_correct,
        density_incorrect,
    })
}
