use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VideoSample;
use crate::error::{Error, Result};

pub const MIN_LABELED: usize = 3;
pub const COVERAGE_RETRIES: usize = 20;

/// Labeled / unlabeled partition of a training set, by video id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub seed: u64,
    /// False when no draw within the retry budget covered every class.
    pub covers_all_classes: bool,
}

/// Number of labeled videos: `⌊fraction · n⌋`, at least three, at most `n`.
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).floor() as usize).max(MIN_LABELED).min(n)
}

fn covers(videos: &[VideoSample], pick: &[usize], num_classes: usize) -> bool {
    let mut seen = vec![false; num_classes];
    for &i in pick {
        for &l in &videos[i].labels {
            if l < num_classes {
                seen[l] = true;
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Random labeled subset; redraws up to [`COVERAGE_RETRIES`] times until the
/// labeled videos contain every action class.
pub fn make_split(videos: &[VideoSample], num_classes: usize, fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("labeled fraction must lie in (0, 1], got {fraction}")));
    }
    if videos.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty training set".into()));
    }
    let k = labeled_count(videos.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..videos.len()).collect();
    let mut ok = false;
    for _ in 0..=COVERAGE_RETRIES {
        idx.shuffle(&mut rng);
        if covers(videos, &idx[..k], num_classes) {
            ok = true;
            break;
        }
    }
    if !ok {
        log::warn!("labeled subset of {k} videos misses some action classes");
    }
    let mut labeled = idx[..k].to_vec();
    let mut unlabeled = idx[k..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    let ids = |v: Vec<usize>| v.into_iter().map(|i| videos[i].id.clone()).collect();
    Ok(SplitSpec {
        labeled: ids(labeled),
        unlabeled: ids(unlabeled),
        seed,
        covers_all_classes: ok,
    })
}
