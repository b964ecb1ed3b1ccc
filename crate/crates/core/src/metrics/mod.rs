//! Segmentation metrics, calibration and wrong-prediction entropy.

mod calibration;
mod segments;

pub use calibration::{calibration, entropy_histogram, histogram_csv, wrong_entropy, CalibrationBin, CalibrationReport, HistogramBin};
pub use segments::{edit_score, f1_at_k, f1_counts, levenshtein, mof, segments_from_labels, F1Counts, IouRule, Segment};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

/// Scores for one evaluation run, all in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub mof: f64,
    pub edit: f64,
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
    pub frames: usize,
    pub videos: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F1Pooling {
    /// Sum TP/FP/FN over all videos, then compute F1 once.
    #[default]
    Pooled,
    /// Average per-video F1 scores.
    PerVideo,
}

/// Accumulates per-video predictions into a [`SegReport`].
#[derive(Clone, Debug)]
pub struct Evaluator {
    rule: IouRule,
    pooling: F1Pooling,
    correct: usize,
    frames: usize,
    edit_sum: f64,
    videos: usize,
    counts: [F1Counts; 3],
    f1_sums: [f64; 3],
}

impl Default for Evaluator {
    fn default() -> Self {
        Evaluator::new(IouRule::Strict, F1Pooling::Pooled)
    }
}

impl Evaluator {
    pub fn new(rule: IouRule, pooling: F1Pooling) -> Self {
        Evaluator {
            rule,
            pooling,
            correct: 0,
            frames: 0,
            edit_sum: 0.0,
            videos: 0,
            counts: [F1Counts::default(); 3],
            f1_sums: [0.0; 3],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} frames, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        if gt.is_empty() {
            return Err(Error::InvalidArgument("empty video".into()));
        }
        self.correct += pred.iter().zip(gt).filter(|(p, g)| p == g).count();
        self.frames += gt.len();
        self.edit_sum += edit_score(pred, gt);
        self.videos += 1;
        for (i, &k) in F1_THRESHOLDS.iter().enumerate() {
            let c = f1_counts(pred, gt, k, self.rule);
            self.counts[i].add(c);
            self.f1_sums[i] += c.f1();
        }
        Ok(())
    }

    pub fn report(&self) -> Result<SegReport> {
        if self.videos == 0 {
            return Err(Error::InvalidArgument("no videos evaluated".into()));
        }
        let f1 = |i: usize| match self.pooling {
            F1Pooling::Pooled => self.counts[i].f1(),
            F1Pooling::PerVideo => self.f1_sums[i] / self.videos as f64,
        };
        Ok(SegReport {
            mof: 100.0 * self.correct as f64 / self.frames as f64,
            edit: self.edit_sum / self.videos as f64,
            f1_10: f1(0),
            f1_25: f1(1),
            f1_50: f1(2),
            frames: self.frames,
            videos: self.videos,
        })
    }
}

/// Evaluates paired prediction / ground-truth label sequences.
pub fn evaluate<'a, I>(pairs: I) -> Result<SegReport>
where
    I: IntoIterator<Item = (&'a [usize], &'a [usize])>,
{
    let mut ev = Evaluator::default();
    for (p, g) in pairs {
        ev.add(p, g)?;
    }
    ev.report()
}
