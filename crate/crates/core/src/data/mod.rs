//! Videos in memory, on-disk formats, synthetic generation and splits.

mod checkpoint;
mod format;
mod split;
mod synthetic;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use format::{
    decode_features, encode_features, load_features, load_labels, save_features, save_labels, Dataset, LabelMap,
    Manifest, ManifestEntry, MANIFEST_FILE, MAPPING_FILE,
};
pub use split::{labeled_count, make_split, SplitSpec};
pub use synthetic::{gen_synthetic, generate, SyntheticConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One video: frame features `[T × F]`, frame labels and its activity label.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub activity: usize,
}

impl VideoSample {
    pub fn new(id: impl Into<String>, features: Tensor, labels: Vec<usize>, activity: usize) -> Result<Self> {
        let id = id.into();
        if features.ndim() != 2 || features.dim(0) == 0 {
            return Err(Error::Data(format!("video {id}: features must be a non-empty [T x F] matrix")));
        }
        if labels.len() != features.dim(0) {
            return Err(Error::Data(format!(
                "video {id}: {} labels for {} frames",
                labels.len(),
                features.dim(0)
            )));
        }
        Ok(VideoSample { id, features, labels, activity })
    }

    pub fn len(&self) -> usize {
        self.features.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feat_dim(&self) -> usize {
        self.features.dim(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}
