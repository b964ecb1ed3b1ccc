//! Encoder / bottleneck / decoder network.

mod config;
mod model;

pub use config::ModelConfig;
pub use model::{DecoderOutputs, Heads, Mode, Model, BN_MOMENTUM};
