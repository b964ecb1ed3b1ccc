use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::format::{save_features, save_labels, LabelMap, Manifest, ManifestEntry, MANIFEST_FILE, MAPPING_FILE};
use super::{Split, VideoSample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Generator settings for sequences of Gaussian action clusters.
///
/// Each activity owns a random cyclic ordering of the actions; a video walks
/// that cycle from a random start, advancing one step or occasionally two.
/// Frame features are the action mean plus isotropic noise, smoothed by a
/// centered moving average. Action means are drawn with per-dimension spread
/// `sigma_between / sqrt(feat_dim)`, so the expected distance between two
/// means is about `sigma_between · √2` regardless of the feature width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_videos: usize,
    pub num_actions: usize,
    pub num_activities: usize,
    pub feat_dim: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub segments_min: usize,
    pub segments_max: usize,
    pub sigma_within: f64,
    pub sigma_between: f64,
    pub smoothing_radius: usize,
    /// Probability that a frame's features come from a random other action.
    pub noise_rate: f64,
    /// Probability of skipping one action when advancing along the cycle.
    pub skip_prob: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_videos: 60,
            num_actions: 6,
            num_activities: 3,
            feat_dim: 32,
            t_min: 256,
            t_max: 512,
            segments_min: 4,
            segments_max: 7,
            sigma_within: 1.5,
            sigma_between: 2.0,
            smoothing_radius: 1,
            noise_rate: 0.05,
            skip_prob: 0.2,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_videos < 2 {
            return bad("num_videos must be >= 2");
        }
        if self.num_actions < 3 {
            return bad("num_actions must be >= 3");
        }
        if self.num_activities == 0 {
            return bad("num_activities must be >= 1");
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be >= 1");
        }
        if self.segments_min == 0 || self.segments_min > self.segments_max {
            return bad("need 1 <= segments_min <= segments_max");
        }
        if self.t_min < 2 * self.segments_max || self.t_min > self.t_max {
            return bad("need 2 * segments_max <= t_min <= t_max");
        }
        if !(self.sigma_between > self.sigma_within) || !(self.sigma_within >= 0.0) {
            return bad("need 0 <= sigma_within < sigma_between");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !(0.0..=1.0).contains(&self.skip_prob) {
            return bad("noise_rate and skip_prob must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn action_names(&self) -> Vec<String> {
        (0..self.num_actions).map(|a| format!("action_{a}")).collect()
    }
}

/// Lengths of `n` segments summing to `t`, each at least `t / (2n)` frames.
fn segment_lengths<R: Rng>(rng: &mut R, t: usize, n: usize) -> Vec<usize> {
    let floor = (t / (2 * n)).max(1);
    let spare = t - floor * n;
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut lens: Vec<usize> = weights
        .iter()
        .map(|w| floor + (spare as f64 * w / total).floor() as usize)
        .collect();
    let assigned: usize = lens.iter().sum();
    lens[n - 1] += t - assigned;
    lens
}

/// Generates every video in memory; the split of each video is returned
/// alongside it.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<(VideoSample, Split)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let f = cfg.feat_dim;
    let c = cfg.num_actions;
    let mean_dist = Normal::new(0.0, cfg.sigma_between / (f as f64).sqrt()).expect("finite spread");
    let noise = Normal::new(0.0, cfg.sigma_within).expect("finite spread");
    let means: Vec<Vec<f64>> = (0..c).map(|_| (0..f).map(|_| mean_dist.sample(&mut rng)).collect()).collect();
    let orders: Vec<Vec<usize>> = (0..cfg.num_activities)
        .map(|_| {
            let mut o: Vec<usize> = (0..c).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();

    let mut ids: Vec<usize> = (0..cfg.num_videos).collect();
    ids.shuffle(&mut rng);
    let n_test = ((cfg.num_videos as f64 * cfg.test_fraction).round() as usize).min(cfg.num_videos - 1);
    let mut is_test = vec![false; cfg.num_videos];
    for &i in &ids[..n_test] {
        is_test[i] = true;
    }

    let mut out = Vec::with_capacity(cfg.num_videos);
    for (vid, test) in is_test.into_iter().enumerate() {
        let activity = vid % cfg.num_activities;
        let order = &orders[activity];
        let t = rng.random_range(cfg.t_min..=cfg.t_max);
        let n_seg = rng.random_range(cfg.segments_min..=cfg.segments_max);
        let mut pos = rng.random_range(0..c);
        let mut actions = Vec::with_capacity(n_seg);
        for _ in 0..n_seg {
            actions.push(order[pos]);
            let step = if rng.random::<f64>() < cfg.skip_prob { 2 } else { 1 };
            pos = (pos + step) % c;
        }
        let lens = segment_lengths(&mut rng, t, n_seg);
        let mut labels = Vec::with_capacity(t);
        for (&a, &l) in actions.iter().zip(&lens) {
            labels.extend(std::iter::repeat_n(a, l));
        }

        let mut raw = vec![0.0; t * f];
        for (frame, &a) in labels.iter().enumerate() {
            let src = if rng.random::<f64>() < cfg.noise_rate {
                (a + rng.random_range(1..c)) % c
            } else {
                a
            };
            for (d, m) in means[src].iter().enumerate() {
                raw[frame * f + d] = m + noise.sample(&mut rng);
            }
        }
        let r = cfg.smoothing_radius;
        let mut data = vec![0.0; t * f];
        for frame in 0..t {
            let lo = frame.saturating_sub(r);
            let hi = (frame + r + 1).min(t);
            let k = (hi - lo) as f64;
            for d in 0..f {
                let s: f64 = (lo..hi).map(|j| raw[j * f + d]).sum();
                // quantize so in-memory values equal what is written to disk
                data[frame * f + d] = (s / k) as f32 as f64;
            }
        }
        let features = Tensor::new(vec![t, f], data)?;
        let split = if test { Split::Test } else { Split::Train };
        out.push((VideoSample::new(format!("video_{vid:03}"), features, labels, activity)?, split));
    }
    Ok(out)
}

/// Writes a generated dataset (features, labels, mapping, manifest) to `out_dir`.
pub fn gen_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<Manifest> {
    let videos = generate(cfg)?;
    let map = LabelMap::new(cfg.action_names())?;
    map.save(&out_dir.join(MAPPING_FILE))?;
    let mut manifest = Manifest::default();
    for (v, split) in &videos {
        let features = format!("features/{}.bin", v.id);
        let labels = format!("labels/{}.txt", v.id);
        save_features(&out_dir.join(&features), &v.features)?;
        save_labels(&out_dir.join(&labels), &v.labels, &map)?;
        manifest.entries.push(ManifestEntry {
            id: v.id.clone(),
            features,
            labels,
            activity: v.activity,
            split: *split,
        });
    }
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
