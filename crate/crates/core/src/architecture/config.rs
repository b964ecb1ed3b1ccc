use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::UpsampleMode;

/// Network shape. Defaults reproduce the published encoder-decoder layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Complex-activity classes; 0 disables the activity head.
    pub num_activities: usize,
    pub kernel: usize,
    pub depth: usize,
    /// Output channels of encoder stages 0..=depth.
    pub encoder_channels: Vec<usize>,
    /// Output channels of decoder stages 1..=depth.
    pub decoder_channels: Vec<usize>,
    pub tpp_windows: Vec<usize>,
    pub upsample_mode: UpsampleMode,
    pub skip_connections: bool,
    pub activity_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 2048,
            num_classes: 48,
            num_activities: 0,
            kernel: 5,
            depth: 6,
            encoder_channels: vec![256, 256, 256, 128, 128, 128, 128],
            decoder_channels: vec![128; 6],
            tpp_windows: vec![2, 3, 5, 6],
            upsample_mode: UpsampleMode::Linear,
            skip_connections: true,
            activity_hidden: 128,
        }
    }
}

impl ModelConfig {
    /// Uniform channel plan of the given width for `depth` layers.
    pub fn uniform(input_dim: usize, num_classes: usize, depth: usize, width: usize) -> Self {
        ModelConfig {
            input_dim,
            num_classes,
            depth,
            encoder_channels: vec![width; depth + 1],
            decoder_channels: vec![width; depth],
            ..ModelConfig::default()
        }
    }

    /// Default layout with the channel plan rescaled for `depth` layers.
    pub fn with_depth(mut self, depth: usize) -> Self {
        let enc = &self.encoder_channels;
        let resample = |plan: &[usize], len: usize| -> Vec<usize> {
            (0..len)
                .map(|i| plan[(i * plan.len() / len.max(1)).min(plan.len() - 1)])
                .collect()
        };
        self.encoder_channels = resample(enc, depth + 1);
        self.decoder_channels = resample(&self.decoder_channels, depth);
        self.depth = depth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.num_activities == 1 {
            return bad("num_activities must be 0 (disabled) or >= 2".into());
        }
        if let Some(w) = self.tpp_windows.iter().find(|&&w| w < 2) {
            return bad(format!("pyramid pooling windows must be >= 2, got {w}"));
        }
        if self.encoder_channels.len() != self.depth + 1 {
            return bad(format!(
                "encoder channel plan needs {} entries, got {}",
                self.depth + 1,
                self.encoder_channels.len()
            ));
        }
        if self.decoder_channels.len() != self.depth {
            return bad(format!(
                "decoder channel plan needs {} entries, got {}",
                self.depth,
                self.decoder_channels.len()
            ));
        }
        if self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .any(|&c| c == 0)
        {
            return bad("channel counts must be >= 1".into());
        }
        if self.num_activities > 0 && self.activity_hidden == 0 {
            return bad("activity_hidden must be >= 1".into());
        }
        Ok(())
    }

    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Shortest input the network accepts without edge padding.
    pub fn min_len(&self) -> usize {
        1 << self.depth
    }

    /// Channels entering the decoder from the bottleneck.
    pub fn bottleneck_channels(&self) -> usize {
        self.encoder_channels[self.depth] + self.tpp_windows.len()
    }

    /// Width of the multi-resolution feature.
    pub fn feature_dim(&self) -> usize {
        self.decoder_channels.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_matches_layout() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.bottleneck_channels(), 132);
        assert_eq!(c.pad(), 2);
        assert_eq!(c.min_len(), 64);
    }

    #[test]
    fn rejects_bad_configs() {
        let even = ModelConfig { kernel: 4, ..ModelConfig::default() };
        assert!(even.validate().is_err());
        let short_plan = ModelConfig { encoder_channels: vec![8; 3], ..ModelConfig::default() };
        assert!(short_plan.validate().is_err());
        let tiny_window = ModelConfig { tpp_windows: vec![1], ..ModelConfig::default() };
        assert!(tiny_window.validate().is_err());
        let zero_depth = ModelConfig { depth: 0, ..ModelConfig::default() };
        assert!(zero_depth.validate().is_err());
    }

    #[test]
    fn with_depth_keeps_plan_lengths_consistent() {
        for d in 1..=8 {
            ModelConfig::default().with_depth(d).validate().unwrap();
        }
    }
}
