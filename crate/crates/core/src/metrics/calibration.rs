use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Fraction of correct frames; 0 for an empty bin.
    pub acc: f64,
    /// Mean confidence; 0 for an empty bin.
    pub conf: f64,
}

impl CalibrationBin {
    /// Positive when under-confident, negative when over-confident.
    pub fn gap(&self) -> f64 {
        self.acc - self.conf
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    /// Frames with confidence above zero, i.e. every binned frame.
    pub frames: usize,
}

impl CalibrationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count,acc,conf,gap\n");
        for b in &self.bins {
            let _ = writeln!(s, "{},{},{},{},{},{}", b.lo, b.hi, b.count, b.acc, b.conf, b.gap());
        }
        s
    }
}

fn check_probs(p: &Tensor, gt: &[usize]) -> Result<()> {
    if p.ndim() != 2 || p.dim(0) != gt.len() {
        return Err(Error::Shape(format!(
            "probabilities {:?} for {} labels",
            p.shape(),
            gt.len()
        )));
    }
    if let Some(&y) = gt.iter().find(|&&y| y >= p.dim(1)) {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    Ok(())
}

fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
}

/// Bins frames of `p` (`[T × C]`, rows are distributions) by confidence into
/// `(n/N, (n+1)/N]`.
pub fn calibration(p: &Tensor, gt: &[usize], num_bins: usize) -> Result<CalibrationReport> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("calibration needs at least one bin".into()));
    }
    check_probs(p, gt)?;
    let n = num_bins as f64;
    let mut count = vec![0usize; num_bins];
    let mut correct = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    for (t, &y) in gt.iter().enumerate() {
        let (k, conf) = argmax(p.row(t));
        if conf <= 0.0 {
            continue;
        }
        let b = ((conf * n).ceil() as usize).clamp(1, num_bins) - 1;
        count[b] += 1;
        correct[b] += usize::from(k == y);
        conf_sum[b] += conf;
    }
    let bins = (0..num_bins)
        .map(|b| {
            let c = count[b];
            let (acc, conf) = if c == 0 {
                (0.0, 0.0)
            } else {
                (correct[b] as f64 / c as f64, conf_sum[b] / c as f64)
            };
            CalibrationBin {
                lo: b as f64 / n,
                hi: (b + 1) as f64 / n,
                count: c,
                acc,
                conf,
            }
        })
        .collect();
    Ok(CalibrationReport {
        bins,
        frames: count.iter().sum(),
    })
}

/// Shannon entropy (nats) of every misclassified frame.
pub fn wrong_entropy(p: &Tensor, gt: &[usize]) -> Result<Vec<f64>> {
    check_probs(p, gt)?;
    Ok(gt
        .iter()
        .enumerate()
        .filter_map(|(t, &y)| {
            let row = p.row(t);
            (argmax(row).0 != y).then(|| -row.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
        })
        .collect())
}

/// Equal-width histogram over `[0, max]`; values above `max` land in the last bin.
pub fn entropy_histogram(values: &[f64], num_bins: usize, max: f64) -> Vec<HistogramBin> {
    if values.is_empty() || num_bins == 0 {
        return Vec::new();
    }
    let width = max / num_bins as f64;
    let mut bins: Vec<HistogramBin> = (0..num_bins)
        .map(|b| HistogramBin {
            lo: b as f64 * width,
            hi: (b + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values {
        let b = if width > 0.0 { ((v / width) as usize).min(num_bins - 1) } else { 0 };
        bins[b].count += 1;
    }
    bins
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for b in bins {
        let _ = writeln!(s, "{},{},{}", b.lo, b.hi, b.count);
    }
    s
}
