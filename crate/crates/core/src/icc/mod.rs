//! Semi-supervised Iterative-Contrast-Classify: classify steps fit fresh
//! segmentation heads (and gently fine-tune the backbone) on labeled videos,
//! contrast steps update the backbone on all training videos using
//! ground truth where known and pseudo-labels elsewhere.

use std::cell::Cell;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architecture::{Heads, Mode, Model};
use crate::augmentation::{pool_features, pool_labels, sample_window, AugmentConfig};
use crate::contrastive::{contrast_epoch, contrast_loss_from_outputs, pretrain_unsupervised, BatchItem, ContrastConfig, PretrainConfig};
use crate::data::{SplitSpec, VideoSample};
use crate::error::{Error, Result};
use crate::metrics::SegReport;
use crate::numerics::{Adam, DatasetStyle, Graph, OptimProfile, Phase, Tensor, Var};
use crate::supervised::{c2f_ensemble, cross_entropy, evaluate_model, joint_loss, predict, predict_video, EnsembleWeights, LossConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ICCConfig {
    pub iterations: usize,
    pub labeled_fraction: f64,
    pub lr_g: f64,
    pub lr_m_classify: f64,
    pub lr_m_contrast: f64,
    pub weight_decay: f64,
    pub classify_epochs: usize,
    pub classify_batch_size: usize,
    /// Epochs of each pseudo-label contrast step.
    pub contrast_epochs: usize,
    /// Epochs of the initial cluster-label contrast step.
    pub pretrain_epochs: usize,
    pub contrast_batch_size: usize,
    pub contrast: ContrastConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    /// Add the transition term to the classify-step loss.
    pub include_transition: bool,
    /// Start from the untrained backbone instead of cluster-label pretraining.
    pub skip_unsupervised: bool,
    pub seed: u64,
}

impl Default for ICCConfig {
    fn default() -> Self {
        let heads = OptimProfile::for_dataset(DatasetStyle::Gtea, Phase::ClassifyHeads);
        let backbone = OptimProfile::for_dataset(DatasetStyle::Gtea, Phase::ClassifyBackbone);
        let contrast = OptimProfile::for_dataset(DatasetStyle::Gtea, Phase::Contrast);
        ICCConfig {
            iterations: 4,
            labeled_fraction: 0.1,
            lr_g: heads.lr,
            lr_m_classify: backbone.lr,
            lr_m_contrast: contrast.lr,
            weight_decay: heads.weight_decay,
            classify_epochs: heads.epochs,
            classify_batch_size: heads.batch_size,
            contrast_epochs: contrast.epochs,
            pretrain_epochs: contrast.epochs,
            contrast_batch_size: contrast.batch_size,
            contrast: ContrastConfig::default(),
            augment: AugmentConfig {
                w0: 4,
                ..AugmentConfig::default()
            },
            loss: LossConfig::default(),
            include_transition: false,
            skip_unsupervised: false,
            seed: 0,
        }
    }
}

impl ICCConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad(format!("labeled_fraction must lie in (0, 1], got {}", self.labeled_fraction));
        }
        for (name, v) in [
            ("lr_g", self.lr_g),
            ("lr_m_classify", self.lr_m_classify),
            ("lr_m_contrast", self.lr_m_contrast),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.lr_m_classify * 10.0 > self.lr_g {
            return bad(format!(
                "lr_m_classify ({}) must be at most a tenth of lr_g ({})",
                self.lr_m_classify, self.lr_g
            ));
        }
        if self.classify_batch_size == 0 || self.contrast_batch_size == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if self.contrast.use_video_level {
            return bad("video-level contrast needs activity labels, which unlabeled videos lack".into());
        }
        self.contrast.validate()?;
        self.augment.validate()?;
        self.loss.validate()
    }

    fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            contrast: self.contrast.clone(),
            epochs: self.pretrain_epochs,
            lr: self.lr_m_contrast,
            weight_decay: self.weight_decay,
            batch_size: self.contrast_batch_size,
            augment: self.augment.clone(),
        }
    }
}

/// Ground-truth label reads, per part of the split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelReads {
    pub labeled: usize,
    pub unlabeled: usize,
}

/// Training videos partitioned by a [`SplitSpec`]. Every ground-truth label
/// access goes through this wrapper and is counted.
#[derive(Debug)]
pub struct AuditedDataset {
    labeled: Vec<VideoSample>,
    unlabeled: Vec<VideoSample>,
    reads: Cell<LabelReads>,
}

impl AuditedDataset {
    pub fn new(train: &[VideoSample], split: &SplitSpec) -> Result<Self> {
        let by_id: HashMap<&str, &VideoSample> = train.iter().map(|v| (v.id.as_str(), v)).collect();
        if by_id.len() != train.len() {
            return Err(Error::Data("duplicate video ids in the training set".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut take = |ids: &[String]| -> Result<Vec<VideoSample>> {
            ids.iter()
                .map(|id| {
                    if !seen.insert(id.clone()) {
                        return Err(Error::Data(format!("video {id} is both labeled and unlabeled")));
                    }
                    by_id
                        .get(id.as_str())
                        .map(|v| (*v).clone())
                        .ok_or_else(|| Error::Data(format!("split names unknown video {id}")))
                })
                .collect()
        };
        let labeled = take(&split.labeled)?;
        let unlabeled = take(&split.unlabeled)?;
        if seen.len() != train.len() {
            return Err(Error::Data(format!(
                "split covers {} of {} training videos",
                seen.len(),
                train.len()
            )));
        }
        Ok(AuditedDataset {
            labeled,
            unlabeled,
            reads: Cell::new(LabelReads::default()),
        })
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn labeled_features(&self, i: usize) -> &Tensor {
        &self.labeled[i].features
    }

    pub fn unlabeled_features(&self, i: usize) -> &Tensor {
        &self.unlabeled[i].features
    }

    pub fn labeled_labels(&self, i: usize) -> &[usize] {
        let mut r = self.reads.get();
        r.labeled += 1;
        self.reads.set(r);
        &self.labeled[i].labels
    }

    pub fn unlabeled_labels(&self, i: usize) -> &[usize] {
        let mut r = self.reads.get();
        r.unlabeled += 1;
        self.reads.set(r);
        &self.unlabeled[i].labels
    }

    pub fn label_reads(&self) -> LabelReads {
        self.reads.get()
    }

    /// Every training video with its labels blanked, labeled ones first.
    fn unlabeled_view(&self) -> Result<Vec<VideoSample>> {
        self.labeled
            .iter()
            .chain(&self.unlabeled)
            .map(|v| VideoSample::new(v.id.clone(), v.features.clone(), vec![0; v.len()], 0))
            .collect()
    }
}

/// Pooled view of `features` with a window drawn from `augment`.
fn pooled_item<R: Rng + ?Sized>(features: &Tensor, labels: &[usize], augment: &AugmentConfig, rng: &mut R) -> Result<BatchItem> {
    let w = if augment.enabled {
        sample_window(augment, rng).min(features.dim(0))
    } else {
        1
    };
    Ok(BatchItem {
        features: pool_features(features, w)?,
        labels: pool_labels(labels, w)?,
        activity: 0,
    })
}

/// Fresh heads, then `classify_epochs` of CE on the uniform ensemble plus
/// the ground-truth contrast loss over labeled videos. Heads learn at `lr_g`,
/// the backbone at `lr_m_classify`. Returns the mean loss per epoch.
pub fn classify_step(model: &mut Model, data: &AuditedDataset, cfg: &ICCConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.num_labeled() == 0 {
        return Err(Error::InvalidArgument("classify step needs at least one labeled video".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.heads = Heads::new(model.config(), rng.random());
    let alpha = EnsembleWeights::uniform(model.config().depth);
    let mut opt_g = Adam::new(cfg.lr_g, cfg.weight_decay);
    let mut opt_m = Adam::new(cfg.lr_m_classify, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.num_labeled()).collect();
    let mut trace = Vec::with_capacity(cfg.classify_epochs);
    for _ in 0..cfg.classify_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.classify_batch_size) {
            let items = batch
                .iter()
                .map(|&i| pooled_item(data.labeled_features(i), data.labeled_labels(i), &cfg.augment, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let inputs: Vec<&Tensor> = items.iter().map(|it| &it.features).collect();
            let mut g = Graph::new();
            let outs = model.forward_batch(&mut g, &inputs, Mode::Train)?;
            let mut acc: Option<Var> = None;
            for (out, item) in outs.iter().zip(&items) {
                let p = c2f_ensemble(&mut g, out, &alpha)?;
                let l = if cfg.include_transition {
                    joint_loss(&mut g, p, &item.labels, &cfg.loss)?.2
                } else {
                    cross_entropy(&mut g, p, &item.labels)?
                };
                acc = Some(match acc {
                    None => l,
                    Some(a) => g.add(a, l)?,
                });
            }
            let ce = g.scale(acc.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
            let (con, _) = contrast_loss_from_outputs(&mut g, &outs, &items, &cfg.contrast, &mut rng)?;
            let loss = g.add(ce, con)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite("classify loss".into()));
            }
            g.backward(loss)?;
            model.params_mut().accumulate_grads(&g);
            model.heads.params_mut().accumulate_grads(&g);
            opt_m.step(model.params_mut());
            opt_g.step(model.heads.params_mut());
            sum += value * batch.len() as f64;
        }
        trace.push(sum / data.num_labeled() as f64);
    }
    Ok(trace)
}

/// Ensemble-argmax labels for every frame of `features`, at the inference
/// window of `augment`.
pub fn pseudo_label(model: &Model, features: &Tensor, augment: &AugmentConfig) -> Result<Vec<usize>> {
    let alpha = EnsembleWeights::uniform(model.config().depth);
    Ok(predict(&predict_video(model, features, &alpha, augment)?))
}

/// Backbone update with the contrast loss over all training videos; labeled
/// videos use ground truth, unlabeled ones `pseudo` (one entry per unlabeled
/// video). Returns the mean loss per epoch.
pub fn contrast_step(
    model: &mut Model,
    data: &AuditedDataset,
    pseudo: &[Vec<usize>],
    cfg: &ICCConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if pseudo.len() != data.num_unlabeled() {
        return Err(Error::InvalidArgument(format!(
            "{} pseudo-label sequences for {} unlabeled videos",
            pseudo.len(),
            data.num_unlabeled()
        )));
    }
    for (i, y) in pseudo.iter().enumerate() {
        if y.len() != data.unlabeled_features(i).dim(0) {
            return Err(Error::Shape(format!("pseudo-labels of unlabeled video {i} have the wrong length")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.lr_m_contrast, cfg.weight_decay);
    let n = data.num_labeled() + data.num_unlabeled();
    let mut trace = Vec::with_capacity(cfg.contrast_epochs);
    for _ in 0..cfg.contrast_epochs {
        let mut items = Vec::with_capacity(n);
        for i in 0..data.num_labeled() {
            items.push(pooled_item(data.labeled_features(i), data.labeled_labels(i), &cfg.augment, &mut rng)?);
        }
        for (i, y) in pseudo.iter().enumerate() {
            items.push(pooled_item(data.unlabeled_features(i), y, &cfg.augment, &mut rng)?);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        trace.push(contrast_epoch(model, &items, &order, &cfg.contrast, cfg.contrast_batch_size, &mut opt, &mut rng)?);
    }
    Ok(trace)
}

/// Outcome of one contrast-classify iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IccReport {
    pub iteration: usize,
    pub skip_unsupervised: bool,
    pub labeled_videos: usize,
    pub unlabeled_videos: usize,
    /// Final-epoch mean of the contrast step; `None` when it was skipped.
    pub contrast_loss: Option<f64>,
    /// Final-epoch mean of the classify step.
    pub classify_loss: Option<f64>,
    /// Test-set scores of the model after the classify step.
    pub test: SegReport,
    /// Cumulative ground-truth reads on the training split.
    pub label_reads: LabelReads,
}

/// Runs `cfg.iterations` contrast-classify rounds on `model`. Round one's
/// contrast step is cluster-label pretraining (or nothing with
/// `skip_unsupervised`); later rounds contrast with pseudo-labels from the
/// previous classify step. Each round is scored on `test`.
pub fn run_icc(model: &mut Model, data: &AuditedDataset, test: &[VideoSample], cfg: &ICCConfig) -> Result<Vec<IccReport>> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(Error::InvalidArgument("ICC needs a non-empty test set".into()));
    }
    let num_classes = model.config().num_classes;
    let alpha = EnsembleWeights::uniform(model.config().depth);
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(cfg.iterations);
    for iteration in 1..=cfg.iterations {
        let contrast_seed: u64 = seeds.random();
        let classify_seed: u64 = seeds.random();
        let contrast_loss = if iteration == 1 {
            if cfg.skip_unsupervised {
                None
            } else {
                let videos = data.unlabeled_view()?;
                let trace = pretrain_unsupervised(model, &videos, num_classes, &cfg.pretrain_config(), contrast_seed)?;
                trace.last().copied()
            }
        } else {
            let pseudo = (0..data.num_unlabeled())
                .map(|i| pseudo_label(model, data.unlabeled_features(i), &cfg.augment))
                .collect::<Result<Vec<_>>>()?;
            contrast_step(model, data, &pseudo, cfg, contrast_seed)?.last().copied()
        };
        let trace = classify_step(model, data, cfg, classify_seed)?;
        let (test_report, _) = evaluate_model(model, test, &alpha, &cfg.augment, None)?;
        log::info!(
            "ICC_{iteration}: test MoF {:.2} Edit {:.2} F1@50 {:.2}",
            test_report.mof,
            test_report.edit,
            test_report.f1_50
        );
        reports.push(IccReport {
            iteration,
            skip_unsupervised: cfg.skip_unsupervised,
            labeled_videos: data.num_labeled(),
            unlabeled_videos: data.num_unlabeled(),
            contrast_loss,
            classify_loss: trace.last().copied(),
            test: test_report,
            label_reads: data.label_reads(),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests;
