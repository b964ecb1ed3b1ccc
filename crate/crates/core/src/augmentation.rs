//! Stochastic temporal max-pooling of input features and majority pooling of
//! labels, plus test-time averaging over sampled windows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::architecture::Model;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::supervised::{c2f_ensemble, EnsembleWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub w0: usize,
    pub pi0: f64,
    pub tta_samples: usize,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            w0: 10,
            pi0: 0.5,
            tta_samples: 5,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w0 < 2 {
            return Err(Error::Config(format!("w0 must be >= 2, got {}", self.w0)));
        }
        if !(self.pi0 > 0.0 && self.pi0 <= 1.0) {
            return Err(Error::Config(format!("pi0 must lie in (0, 1], got {}", self.pi0)));
        }
        if self.tta_samples == 0 {
            return Err(Error::Config("tta_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Windows `⌊w0/2⌋ ..= 2·w0`.
    pub fn support(&self) -> std::ops::RangeInclusive<usize> {
        self.w0 / 2..=2 * self.w0
    }

    /// Window used for deterministic inference.
    pub fn inference_window(&self) -> usize {
        if self.enabled {
            self.w0
        } else {
            1
        }
    }

    /// Probability mass of `w`.
    pub fn prob(&self, w: usize) -> f64 {
        let support = self.support();
        if !support.contains(&w) {
            return 0.0;
        }
        if w == self.w0 {
            self.pi0
        } else {
            (1.0 - self.pi0) / (support.count() - 1) as f64
        }
    }
}

fn check_window(t: usize, w: usize) -> Result<()> {
    if w == 0 || w > t {
        return Err(Error::InvalidArgument(format!("pooling window {w} invalid for {t} frames")));
    }
    Ok(())
}

/// Row-wise max over windows `[w·t, w·t + w)` of `V: [T × F]`.
pub fn pool_features(v: &Tensor, w: usize) -> Result<Tensor> {
    if v.ndim() != 2 {
        return Err(Error::Shape(format!("features must be [T x F], got {:?}", v.shape())));
    }
    let (t, f) = (v.dim(0), v.dim(1));
    check_window(t, w)?;
    if w == 1 {
        return Ok(v.clone());
    }
    let n = t.div_ceil(w);
    let mut out = vec![f64::NEG_INFINITY; n * f];
    for (i, chunk) in v.data().chunks(w * f).enumerate() {
        let dst = &mut out[i * f..(i + 1) * f];
        for row in chunk.chunks(f) {
            for (d, &x) in dst.iter_mut().zip(row) {
                if x > *d {
                    *d = x;
                }
            }
        }
    }
    Tensor::new(vec![n, f], out)
}

/// Most frequent label per window; ties go to the smaller class id.
pub fn pool_labels(y: &[usize], w: usize) -> Result<Vec<usize>> {
    check_window(y.len(), w)?;
    if w == 1 {
        return Ok(y.to_vec());
    }
    Ok(y
        .chunks(w)
        .map(|chunk| {
            let mut counts: Vec<(usize, usize)> = Vec::with_capacity(w);
            for &l in chunk {
                match counts.iter_mut().find(|(c, _)| *c == l) {
                    Some(e) => e.1 += 1,
                    None => counts.push((l, 1)),
                }
            }
            counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(l, _)| l)
                .expect("window is non-empty")
        })
        .collect())
}

/// Draws `w0` with probability `pi0`, otherwise a uniform other support value.
pub fn sample_window<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    if u < cfg.pi0 {
        return cfg.w0;
    }
    let lo = cfg.w0 / 2;
    let hi = 2 * cfg.w0;
    // draw from the support with w0 removed, then shift past it
    let w = rng.random_range(lo..hi);
    if w >= cfg.w0 {
        w + 1
    } else {
        w
    }
}

/// Ensemble probabilities `[T × C]` after pooling `V` with window `w`
/// (clamped to `T`) and upsampling the prediction back to `T` frames.
pub fn predict_pooled(model: &Model, v: &Tensor, w: usize, alpha: &EnsembleWeights) -> Result<Tensor> {
    let t = v.dim(0);
    let pooled = pool_features(v, w.clamp(1, t.max(1)))?;
    let mut g = Graph::new();
    let out = model.forward_eval(&mut g, &pooled)?;
    let p = c2f_ensemble(&mut g, &out, alpha)?;
    let p = g.upsample1d(p, t, model.config().upsample_mode)?;
    Ok(g.value(p).transpose())
}

/// Monte-Carlo estimate of the expected prediction over the window
/// distribution, `[T × C]`.
pub fn tta_predict<R: Rng + ?Sized>(
    model: &Model,
    v: &Tensor,
    cfg: &AugmentConfig,
    alpha: &EnsembleWeights,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut acc: Option<Tensor> = None;
    for _ in 0..cfg.tta_samples {
        let w = sample_window(cfg, rng);
        let p = predict_pooled(model, v, w, alpha)?;
        match &mut acc {
            None => acc = Some(p),
            Some(a) => a.data_mut().iter_mut().zip(p.data()).for_each(|(x, y)| *x += y),
        }
    }
    let mut acc = acc.expect("tta_samples >= 1");
    let n = cfg.tta_samples as f64;
    acc.data_mut().iter_mut().for_each(|x| *x /= n);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::architecture::ModelConfig;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn pool_feature_examples() {
        let v = col(&[1.0, 3.0, 2.0, 5.0]);
        assert_eq!(pool_features(&v, 2).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(pool_features(&v, 1).unwrap(), v);
        let v5 = col(&[1.0, 0.0, 2.0, 0.0, -4.0]);
        let p = pool_features(&v5, 2).unwrap();
        assert_eq!(p.shape(), &[3, 1]);
        assert_eq!(p.data()[2], -4.0);
        assert!(pool_features(&v, 5).is_err());
    }

    #[test]
    fn pool_label_examples() {
        assert_eq!(pool_labels(&[0, 0, 1, 1], 2).unwrap(), vec![0, 1]);
        assert_eq!(pool_labels(&[0, 1], 2).unwrap(), vec![0]);
        assert_eq!(pool_labels(&[1, 0], 2).unwrap(), vec![0]);
        assert_eq!(pool_labels(&[2, 1, 2], 1).unwrap(), vec![2, 1, 2]);
        assert_eq!(pool_labels(&[3, 2, 3, 1, 1], 3).unwrap(), vec![3, 1]);
    }

    #[test]
    fn constant_rows_survive_pooling() {
        let v = Tensor::new(vec![7, 2], [1.5, -2.0].repeat(7)).unwrap();
        let p = pool_features(&v, 3).unwrap();
        assert!(p.data().chunks(2).all(|r| r == [1.5, -2.0]));
        assert_eq!(pool_features(&p, 1).unwrap(), p);
    }

    #[test]
    fn window_support_and_mass() {
        let cfg = AugmentConfig { w0: 4, ..AugmentConfig::default() };
        assert_eq!(cfg.support(), 2..=8);
        let total: f64 = cfg.support().map(|w| cfg.prob(w)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [0usize; 9];
        for _ in 0..20_000 {
            let w = sample_window(&cfg, &mut rng);
            assert!(cfg.support().contains(&w));
            seen[w] += 1;
        }
        assert!(seen[2..].iter().all(|&c| c > 0));
    }

    #[test]
    fn pi0_one_always_gives_w0() {
        let cfg = AugmentConfig { w0: 6, pi0: 1.0, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| sample_window(&cfg, &mut rng) == 6));
    }

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            kernel: 3,
            ..ModelConfig::uniform(3, 4, 2, 6)
        };
        Model::new(cfg, 11).unwrap()
    }

    fn features(t: usize) -> Tensor {
        let data = (0..t * 3).map(|i| ((i * 7919) % 13) as f64 / 6.0 - 1.0).collect();
        Tensor::new(vec![t, 3], data).unwrap()
    }

    #[test]
    fn tta_rows_are_distributions() {
        let m = tiny_model();
        let cfg = AugmentConfig { w0: 2, ..AugmentConfig::default() };
        let alpha = EnsembleWeights::uniform(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = tta_predict(&m, &features(23), &cfg, &alpha, &mut rng).unwrap();
        assert_eq!(p.shape(), &[23, 4]);
        for r in p.data().chunks(4) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_forced_tta_sample_equals_plain_prediction() {
        let m = tiny_model();
        let cfg = AugmentConfig { w0: 3, pi0: 1.0, tta_samples: 1, enabled: true };
        let alpha = EnsembleWeights::uniform(2);
        let v = features(17);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = tta_predict(&m, &v, &cfg, &alpha, &mut rng).unwrap();
        let b = predict_pooled(&m, &v, cfg.inference_window(), &alpha).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tta_converges_to_exhaustive_expectation() {
        let m = tiny_model();
        let cfg = AugmentConfig { w0: 2, tta_samples: 10_000, ..AugmentConfig::default() };
        let alpha = EnsembleWeights::uniform(2);
        let v = features(20);
        let mut expect = Tensor::zeros(&[20, 4]);
        for w in cfg.support() {
            let p = predict_pooled(&m, &v, w, &alpha).unwrap();
            let pw = cfg.prob(w);
            expect.data_mut().iter_mut().zip(p.data()).for_each(|(e, x)| *e += pw * x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let got = tta_predict(&m, &v, &cfg, &alpha, &mut rng).unwrap();
        for (a, b) in got.data().chunks(4).zip(expect.data().chunks(4)) {
            let l1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
            assert!(l1 <= 0.02, "{l1}");
        }
    }
}
