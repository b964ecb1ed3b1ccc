use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{activity_loss, c2f_ensemble, c2f_ensemble_learned, joint_loss, predict, EnsembleWeights, LossConfig};
use crate::architecture::{Mode, Model};
use crate::augmentation::{pool_features, pool_labels, predict_pooled, sample_window, tta_predict, AugmentConfig};
use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::metrics::{Evaluator, SegReport};
use crate::numerics::{Adam, DatasetStyle, Graph, OptimProfile, ParamStore, Phase, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Videos per optimizer step.
    pub batch_size: usize,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Apply the joint loss to every decoder output instead of the ensemble.
    pub loss_per_layer: bool,
    /// Learn the ensemble weights through a softmax over logits.
    pub learned_alpha: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::from_profile(
            OptimProfile::for_dataset(DatasetStyle::Gtea, Phase::FullSupervision),
            AugmentConfig {
                w0: 4,
                ..AugmentConfig::default()
            },
        )
    }
}

impl TrainConfig {
    pub fn from_profile(p: OptimProfile, augment: AugmentConfig) -> Self {
        TrainConfig {
            epochs: p.epochs,
            lr: p.lr,
            weight_decay: p.weight_decay,
            batch_size: p.batch_size,
            loss: LossConfig::default(),
            augment,
            loss_per_layer: false,
            learned_alpha: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

/// Mean per-video losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub ce: f64,
    pub tr: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn csv(trace: &[LossRecord]) -> String {
        let mut s = String::from("epoch,ce,tr,total\n");
        for r in trace {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.ce, r.tr, r.total);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trace: Vec<LossRecord>,
    pub alpha: EnsembleWeights,
}

/// Pools a video with a window drawn from `augment` (or keeps it intact when
/// augmentation is disabled).
pub(crate) fn augmented_view(
    v: &VideoSample,
    augment: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    if !augment.enabled {
        return Ok((v.features.clone(), v.labels.clone()));
    }
    let w = sample_window(augment, rng).min(v.len());
    Ok((pool_features(&v.features, w)?, pool_labels(&v.labels, w)?))
}

fn softmax_weights(logits: &[f64]) -> Result<EnsembleWeights> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    EnsembleWeights::normalized(&e)
}

/// Supervised training with the joint loss; mutates `model` in place.
pub fn train_supervised(
    model: &mut Model,
    videos: &[VideoSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let depth = model.config().depth;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt_m = Adam::new(cfg.lr, cfg.weight_decay);
    let mut opt_g = Adam::new(cfg.lr, cfg.weight_decay);
    let mut alpha_store = ParamStore::new();
    let alpha_id = alpha_store.add("ensemble.logits", Tensor::zeros(&[depth, 1]), true);
    let mut opt_a = Adam::new(cfg.lr, 0.0);
    let fixed_alpha = EnsembleWeights::uniform(depth);
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut tr_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let views = batch
                .iter()
                .map(|&i| augmented_view(&videos[i], &cfg.augment, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let inputs: Vec<&Tensor> = views.iter().map(|(f, _)| f).collect();
            let mut g = Graph::new();
            let outs = model.forward_batch(&mut g, &inputs, Mode::Train)?;
            let mut batch_total: Option<Var> = None;
            for (out, (_, labels)) in outs.iter().zip(&views) {
                let (ce, tr, total) = if cfg.loss_per_layer {
                    let mut sums: Option<(Var, Var, Var)> = None;
                    for &p in &out.p {
                        let (c, t, tot) = joint_loss(&mut g, p, labels, &cfg.loss)?;
                        sums = Some(match sums {
                            None => (c, t, tot),
                            Some((a, b, d)) => (g.add(a, c)?, g.add(b, t)?, g.add(d, tot)?),
                        });
                    }
                    let (a, b, d) = sums.expect("depth >= 1");
                    let k = 1.0 / depth as f64;
                    (g.scale(a, k)?, g.scale(b, k)?, g.scale(d, k)?)
                } else {
                    let p = if cfg.learned_alpha {
                        let logits = alpha_store.bind(&mut g, alpha_id)?;
                        c2f_ensemble_learned(&mut g, out, logits)?
                    } else {
                        c2f_ensemble(&mut g, out, &fixed_alpha)?
                    };
                    joint_loss(&mut g, p, labels, &cfg.loss)?
                };
                ce_sum += g.value(ce).data()[0];
                tr_sum += g.value(tr).data()[0];
                total_sum += g.value(total).data()[0];
                batch_total = Some(match batch_total {
                    None => total,
                    Some(acc) => g.add(acc, total)?,
                });
            }
            let mean = g.scale(batch_total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
            g.backward(mean)?;
            model.params_mut().accumulate_grads(&g);
            model.heads.params_mut().accumulate_grads(&g);
            alpha_store.accumulate_grads(&g);
            opt_m.step(model.params_mut());
            opt_g.step(model.heads.params_mut());
            if cfg.learned_alpha {
                opt_a.step(&mut alpha_store);
            } else {
                alpha_store.zero_grad();
            }
        }
        let n = videos.len() as f64;
        let rec = LossRecord {
            epoch,
            ce: ce_sum / n,
            tr: tr_sum / n,
            total: total_sum / n,
        };
        log::debug!("epoch {epoch}: ce {:.4} tr {:.4} total {:.4}", rec.ce, rec.tr, rec.total);
        trace.push(rec);
    }
    let alpha = if cfg.learned_alpha {
        softmax_weights(alpha_store.get(alpha_id).data())?
    } else {
        fixed_alpha
    };
    Ok(TrainOutcome { trace, alpha })
}

/// Ensemble probabilities `[T × C]` with the deterministic inference window.
pub fn predict_video(
    model: &Model,
    v: &Tensor,
    alpha: &EnsembleWeights,
    augment: &AugmentConfig,
) -> Result<Tensor> {
    predict_pooled(model, v, augment.inference_window(), alpha)
}

/// Segmentation report over `videos`; with `tta_seed` predictions average
/// over sampled windows instead of using the base window.
pub fn evaluate_model(
    model: &Model,
    videos: &[VideoSample],
    alpha: &EnsembleWeights,
    augment: &AugmentConfig,
    tta_seed: Option<u64>,
) -> Result<(SegReport, Vec<Tensor>)> {
    let mut ev = Evaluator::default();
    let mut probs = Vec::with_capacity(videos.len());
    let mut rng = tta_seed.map(ChaCha8Rng::seed_from_u64);
    for v in videos {
        let p = match rng.as_mut() {
            Some(r) if augment.enabled => tta_predict(model, &v.features, augment, alpha, r)?,
            _ => predict_video(model, &v.features, alpha, augment)?,
        };
        ev.add(&predict(&p), &v.labels)?;
        probs.push(p);
    }
    Ok((ev.report()?, probs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityReport {
    /// Video-level accuracy in percent.
    pub accuracy: f64,
    pub videos: usize,
    pub predictions: Vec<usize>,
}

/// Trains the encoder and activity head with the video-level loss only.
pub fn train_activity(
    model: &mut Model,
    videos: &[VideoSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let num_act = model.config().num_activities;
    if let Some(v) = videos.iter().find(|v| v.activity >= num_act) {
        return Err(Error::Data(format!(
            "video {} has activity {} but the model has {num_act} activity classes",
            v.id, v.activity
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt_m = Adam::new(cfg.lr, cfg.weight_decay);
    let mut opt_a = Adam::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let views = batch
                .iter()
                .map(|&i| Ok(augmented_view(&videos[i], &cfg.augment, &mut rng)?.0))
                .collect::<Result<Vec<_>>>()?;
            let inputs: Vec<&Tensor> = views.iter().collect();
            let mut g = Graph::new();
            let probs = model.activity_probs_batch(&mut g, &inputs, Mode::Train)?;
            let mut acc: Option<Var> = None;
            for (&p, &i) in probs.iter().zip(batch) {
                let loss = activity_loss(&mut g, p, videos[i].activity)?;
                sum += g.value(loss).data()[0];
                acc = Some(match acc {
                    None => loss,
                    Some(a) => g.add(a, loss)?,
                });
            }
            let mean = g.scale(acc.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
            g.backward(mean)?;
            model.params_mut().accumulate_grads(&g);
            if let Some(s) = model.activity_params_mut() {
                s.accumulate_grads(&g);
            }
            opt_m.step(model.params_mut());
            if let Some(s) = model.activity_params_mut() {
                opt_a.step(s);
            }
        }
        let mean = sum / videos.len() as f64;
        trace.push(LossRecord {
            epoch,
            ce: mean,
            tr: 0.0,
            total: mean,
        });
    }
    Ok(trace)
}

/// Video-level activity accuracy with the deterministic inference window.
pub fn evaluate_activity(model: &Model, videos: &[VideoSample], augment: &AugmentConfig) -> Result<ActivityReport> {
    let mut predictions = Vec::with_capacity(videos.len());
    let mut correct = 0;
    for v in videos {
        let w = augment.inference_window().min(v.len());
        let feats = pool_features(&v.features, w)?;
        let mut g = Graph::new();
        let p = model.activity_probs_eval(&mut g, &feats)?;
        let p = g.value(p);
        let k = predict(&p.transpose())[0];
        correct += usize::from(k == v.activity);
        predictions.push(k);
    }
    Ok(ActivityReport {
        accuracy: if videos.is_empty() { 0.0 } else { 100.0 * correct as f64 / videos.len() as f64 },
        videos: videos.len(),
        predictions,
    })
}
