//! Minimal deterministic tensor engine with reverse-mode differentiation.

mod gemm;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{BatchStats, Graph, UpsampleMode, Var, BN_EPS};
pub use optim::{Adam, DatasetStyle, OptimProfile, Phase};
pub use params::{he_uniform, Param, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `a·b / (‖a‖‖b‖)`; zero-norm inputs are rejected.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
