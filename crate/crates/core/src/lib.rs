//! Coarse-to-fine temporal convolutional network (C2F-TCN) for temporal action
//! segmentation, with stochastic temporal feature augmentation, contrastive
//! representation learning and iterative semi-supervised training.

pub mod architecture;
pub mod augmentation;
pub mod cli;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod icc;
pub mod metrics;
pub mod numerics;
pub mod supervised;

pub use error::{Error, Result};
