//! Contrastive representation learning: batch clustering, proximity sampling,
//! positive/negative sets, the multi-resolution feature and its losses.

mod kmeans;
mod train;

pub use kmeans::{kmeans, KMeans};
pub(crate) use train::contrast_epoch;
pub use train::{
    contrast_batch_loss, contrast_loss_from_outputs, linear_eval, linear_eval_raw, pretrain_unsupervised, BatchItem, LinearEvalConfig,
    PretrainConfig,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::architecture::DecoderOutputs;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, UpsampleMode, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    /// Partitions per video.
    pub k: usize,
    /// Companion offset in normalized time; `None` means `1/(3K)`.
    pub epsilon: Option<f64>,
    /// Temporal proximity threshold for positives, in normalized time.
    pub delta: f64,
    pub tau: f64,
    /// Clusters per batch; `None` means twice the number of action classes.
    pub num_clusters: Option<usize>,
    pub use_video_level: bool,
    pub upsample_mode: UpsampleMode,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            k: 20,
            epsilon: None,
            delta: 0.02,
            tau: 0.1,
            num_clusters: None,
            use_video_level: false,
            upsample_mode: UpsampleMode::Linear,
        }
    }
}

impl ContrastConfig {
    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(1.0 / (3.0 * self.k as f64))
    }

    pub fn clusters(&self, num_classes: usize) -> usize {
        self.num_clusters.unwrap_or(2 * num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        let eps = self.epsilon();
        if !(eps > 0.0 && eps < 1.0 / self.k as f64) {
            return bad(format!("epsilon must lie in (0, 1/K), got {eps}"));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.num_clusters.is_some_and(|c| c < 2) {
            return bad("num_clusters must be >= 2".into());
        }
        Ok(())
    }
}

/// Sampled frames of one video: `2K` frame indices and their normalized times.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledFrames {
    pub frames: Vec<usize>,
    pub times: Vec<f64>,
}

/// One frame from each of `K` equal partitions, then for each a companion
/// frame within `epsilon` of it (another frame whenever one is in reach).
pub fn sample_frames<R: Rng + ?Sized>(t_n: usize, cfg: &ContrastConfig, rng: &mut R) -> Result<SampledFrames> {
    let k = cfg.k;
    if t_n < k {
        return Err(Error::InvalidArgument(format!("video of {t_n} frames is shorter than K = {k}")));
    }
    let t = t_n as f64;
    let eps = cfg.epsilon();
    let mut frames = Vec::with_capacity(2 * k);
    for i in 0..k {
        // frames j with j/T in [i/K, (i+1)/K)
        let lo = (i * t_n).div_ceil(k);
        let hi = ((i + 1) * t_n).div_ceil(k);
        frames.push(rng.random_range(lo..hi));
    }
    for i in 0..k {
        let j = frames[i];
        let reach = (eps * t).floor() as usize;
        let lo = j.saturating_sub(reach);
        let hi = (j + reach).min(t_n - 1);
        let companion = if hi > lo {
            // skip j itself by drawing from the range with one slot removed
            let c = rng.random_range(lo..hi);
            if c >= j {
                c + 1
            } else {
                c
            }
        } else {
            j
        };
        frames.push(companion);
    }
    let times = frames.iter().map(|&j| j as f64 / t).collect();
    Ok(SampledFrames { frames, times })
}

/// Per-sample attributes used to form positive and negative sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleInfo {
    pub video: usize,
    pub time: f64,
    pub label: usize,
    pub activity: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct PosNegSets {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl PosNegSets {
    pub fn num_pairs(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    /// Every `(anchor, positive)` pair.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.positives
            .iter()
            .enumerate()
            .flat_map(|(i, ps)| ps.iter().map(move |&j| (i, j)))
            .collect()
    }
}

/// Positives share activity and label and lie closer than `delta` in time;
/// negatives differ in activity, or share it but differ in label. Same-label
/// samples at or beyond `delta` belong to neither set. With
/// `use_activity = false` every sample counts as the same activity.
pub fn build_sets(samples: &[SampleInfo], delta: f64, use_activity: bool) -> PosNegSets {
    let n = samples.len();
    let mut sets = PosNegSets {
        positives: vec![Vec::new(); n],
        negatives: vec![Vec::new(); n],
    };
    for (i, a) in samples.iter().enumerate() {
        for (j, b) in samples.iter().enumerate() {
            if i == j {
                continue;
            }
            let same_activity = !use_activity || a.activity == b.activity;
            if !same_activity || a.label != b.label {
                sets.negatives[i].push(j);
            } else if (a.time - b.time).abs() < delta {
                sets.positives[i].push(j);
            }
        }
    }
    sets
}

/// Each decoder feature upsampled to `t` frames, before normalization.
fn upsampled_blocks(g: &mut Graph, out: &DecoderOutputs, t: usize, mode: UpsampleMode) -> Result<Vec<Var>> {
    if out.z.is_empty() {
        return Err(Error::Shape("no decoder outputs".into()));
    }
    out.z
        .iter()
        .map(|&z| {
            let mut up = g.upsample1d(z, out.t_padded, mode)?;
            if out.t_padded != out.t_in {
                up = g.slice_cols(up, 0, out.t_in)?;
            }
            if t != out.t_in {
                up = g.upsample1d(up, t, mode)?;
            }
            Ok(up)
        })
        .collect()
}

fn normalize_block(g: &mut Graph, x: Var, u: usize) -> Result<Var> {
    g.normalize_cols(x).map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("decoder layer {}: {m}", u + 1)),
        other => other,
    })
}

/// Upsamples every decoder feature to `t` frames, L2-normalizes each layer
/// block per frame and stacks the blocks: `[Σ channels × t]`.
pub fn multires_feature(g: &mut Graph, out: &DecoderOutputs, t: usize, mode: UpsampleMode) -> Result<Var> {
    let blocks = upsampled_blocks(g, out, t, mode)?
        .into_iter()
        .enumerate()
        .map(|(u, up)| normalize_block(g, up, u))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&blocks)
}

/// Columns `frames` of [`multires_feature`], skipping frames where some
/// layer block is exactly zero. Returns the feature `[Σ channels × kept]`
/// and the positions in `frames` that were kept.
pub fn multires_columns(
    g: &mut Graph,
    out: &DecoderOutputs,
    t: usize,
    mode: UpsampleMode,
    frames: &[usize],
) -> Result<(Var, Vec<usize>)> {
    let picked = upsampled_blocks(g, out, t, mode)?
        .into_iter()
        .map(|up| g.gather_cols(up, frames))
        .collect::<Result<Vec<_>>>()?;
    let mut live = vec![true; frames.len()];
    for &b in &picked {
        let v = g.value(b);
        let n = v.dim(1);
        for (j, ok) in live.iter_mut().enumerate() {
            if (0..v.dim(0)).all(|r| v.data()[r * n + j] == 0.0) {
                *ok = false;
            }
        }
    }
    let kept: Vec<usize> = (0..frames.len()).filter(|&j| live[j]).collect();
    if kept.is_empty() {
        return Err(Error::NonFinite("every sampled frame has a zero decoder block".into()));
    }
    let mut blocks = Vec::with_capacity(picked.len());
    for (u, b) in picked.into_iter().enumerate() {
        let b = if kept.len() < frames.len() { g.gather_cols(b, &kept)? } else { b };
        blocks.push(normalize_block(g, b, u)?);
    }
    Ok((g.concat(&blocks)?, kept))
}

/// Cosine similarity between columns `a` and `b` of `f`.
fn column_cos(f: &Tensor, a: usize, b: usize) -> Result<f64> {
    let (d, n) = (f.dim(0), f.dim(1));
    let ca: Vec<f64> = (0..d).map(|r| f.data()[r * n + a]).collect();
    let cb: Vec<f64> = (0..d).map(|r| f.data()[r * n + b]).collect();
    crate::numerics::cosine_similarity(&ca, &cb)
}

/// `e(i,j) / (e(i,j) + Σ_{k∈N_i} e(i,k))` with `e = exp(cos/τ)`, for sample
/// features stored as the columns of `f`.
pub fn frame_contrast_prob(f: &Tensor, sets: &PosNegSets, i: usize, j: usize, tau: f64) -> Result<f64> {
    if f.ndim() != 2 || f.dim(0) == 0 {
        return Err(Error::Shape("empty feature".into()));
    }
    if !sets.positives[i].contains(&j) {
        return Err(Error::InvalidArgument(format!("sample {j} is not a positive of {i}")));
    }
    let pos = column_cos(f, i, j)? / tau;
    let negs = sets.negatives[i]
        .iter()
        .map(|&k| Ok(column_cos(f, i, k)? / tau))
        .collect::<Result<Vec<f64>>>()?;
    let m = negs.iter().cloned().fold(pos, f64::max);
    let den: f64 = (pos - m).exp() + negs.iter().map(|v| (v - m).exp()).sum::<f64>();
    Ok((pos - m).exp() / den)
}

/// Video-level pairs: positives are other videos of the same activity,
/// negatives the videos of other activities. `None` when fewer than two
/// activities are present or no video has a same-activity partner.
pub fn video_sets(activities: &[usize]) -> Option<PosNegSets> {
    let first = *activities.first()?;
    if activities.iter().all(|&a| a == first) {
        return None;
    }
    let samples: Vec<SampleInfo> = activities
        .iter()
        .enumerate()
        .map(|(n, &a)| SampleInfo {
            video: n,
            time: 0.0,
            label: 0,
            activity: a,
        })
        .collect();
    let sets = build_sets(&samples, f64::INFINITY, true);
    (sets.num_pairs() > 0).then_some(sets)
}

/// Mean `−log p` over video-level pairs, from per-video max-pooled features
/// `h_n` (each `[D × 1]`).
pub fn video_contrast(g: &mut Graph, h: &[Var], activities: &[usize], tau: f64) -> Result<Option<Var>> {
    let Some(sets) = video_sets(activities) else {
        return Ok(None);
    };
    let rows = h.iter().map(|&c| g.transpose(c)).collect::<Result<Vec<_>>>()?;
    let stacked = g.concat(&rows)?;
    let cols = g.transpose(stacked)?;
    let normed = g.normalize_cols(cols)?;
    let normed_t = g.transpose(normed)?;
    let sim = g.matmul(normed_t, normed)?;
    Ok(Some(g.contrast_nll(sim, &sets.pairs(), &sets.negatives, tau)?))
}
