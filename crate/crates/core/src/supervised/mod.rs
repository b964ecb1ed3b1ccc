//! Coarse-to-fine ensembling, segmentation losses and supervised training.

mod train;

pub use train::{
    evaluate_activity, evaluate_model, predict_video, train_activity, train_supervised, ActivityReport, LossRecord, TrainConfig,
    TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::architecture::DecoderOutputs;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const LOG_FLOOR: f64 = 1e-12;

/// Non-negative per-decoder weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights(Vec<f64>);

impl EnsembleWeights {
    pub fn uniform(n: usize) -> Self {
        EnsembleWeights(vec![1.0 / n as f64; n])
    }

    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config(format!("ensemble weights must be non-negative, got {alpha:?}")));
        }
        let s: f64 = alpha.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("ensemble weights sum to {s}, expected 1")));
        }
        Ok(EnsembleWeights(alpha))
    }

    /// Rescales positive weights to sum to one.
    pub fn normalized(alpha: &[f64]) -> Result<Self> {
        let s: f64 = alpha.iter().sum();
        if !(s > 0.0) {
            return Err(Error::Config("ensemble weights must have positive sum".into()));
        }
        EnsembleWeights::new(alpha.iter().map(|a| a / s).collect())
    }

    /// Puts all weight on decoder layer `u` (0-based).
    pub fn single(n: usize, u: usize) -> Self {
        let mut a = vec![0.0; n];
        a[u] = 1.0;
        EnsembleWeights(a)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `Σ_u α_u p^(u)` over the upsampled per-layer probabilities, `[C × T]`.
pub fn c2f_ensemble(g: &mut Graph, out: &DecoderOutputs, alpha: &EnsembleWeights) -> Result<Var> {
    if alpha.len() != out.p.len() {
        return Err(Error::Shape(format!(
            "{} ensemble weights for {} decoder outputs",
            alpha.len(),
            out.p.len()
        )));
    }
    let w = g.constant(Tensor::new(vec![alpha.len()], alpha.0.clone())?)?;
    g.mix(&out.p, w)
}

/// Mixes with softmax-normalized learnable logits `[depth × 1]`.
pub fn c2f_ensemble_learned(g: &mut Graph, out: &DecoderOutputs, logits: Var) -> Result<Var> {
    let w = g.softmax(logits)?;
    g.mix(&out.p, w)
}

/// Per-frame argmax of `[T × C]` rows; ties go to the smaller class.
pub fn predict(p: &Tensor) -> Vec<usize> {
    let c = p.dim(1);
    p.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_tr: f64,
    pub eps_max: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_tr: 0.15,
            eps_max: 4.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_tr >= 0.0) || !(self.eps_max > 0.0) {
            return Err(Error::Config(format!(
                "need lambda_tr >= 0 and eps_max > 0, got {} and {}",
                self.lambda_tr, self.eps_max
            )));
        }
        Ok(())
    }
}

/// `−(1/T) Σ_t log p[y_t, t]` for `p: [C × T]`.
pub fn cross_entropy(g: &mut Graph, p: Var, y: &[usize]) -> Result<Var> {
    let picked = g.pick(p, y)?;
    let logp = g.log_clamped(picked, LOG_FLOOR)?;
    let m = g.mean(logp)?;
    g.scale(m, -1.0)
}

/// `(1/T) Σ_{t≥1} Σ_k min(|log p[k,t] − log p[k,t−1]|, eps_max)²`; zero for `T < 2`.
pub fn transition_loss(g: &mut Graph, p: Var, cfg: &LossConfig) -> Result<Var> {
    let t = g.shape(p)[1];
    if t < 2 {
        return g.constant(Tensor::scalar(0.0));
    }
    let logp = g.log_clamped(p, LOG_FLOOR)?;
    let cur = g.slice_cols(logp, 1, t - 1)?;
    let prev = g.slice_cols(logp, 0, t - 1)?;
    let d = g.sub(cur, prev)?;
    let d = g.abs(d)?;
    let d = g.clamp_max(d, cfg.eps_max)?;
    let d = g.square(d)?;
    let s = g.sum(d)?;
    g.scale(s, 1.0 / t as f64)
}

/// Joint loss handles: `(ce, tr, ce + λ·tr)`.
pub fn joint_loss(g: &mut Graph, p: Var, y: &[usize], cfg: &LossConfig) -> Result<(Var, Var, Var)> {
    let ce = cross_entropy(g, p, y)?;
    let tr = transition_loss(g, p, cfg)?;
    let weighted = g.scale(tr, cfg.lambda_tr)?;
    let total = g.add(ce, weighted)?;
    Ok((ce, tr, total))
}

/// `−log p_V[y_V]` for activity probabilities `[C_V × 1]`.
pub fn activity_loss(g: &mut Graph, p_v: Var, y_v: usize) -> Result<Var> {
    cross_entropy(g, p_v, &[y_v])
}
