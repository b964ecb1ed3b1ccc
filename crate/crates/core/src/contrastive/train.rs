use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_sets, kmeans, multires_columns, multires_feature, sample_frames, video_contrast, ContrastConfig, SampleInfo};
use crate::architecture::{DecoderOutputs, Mode, Model};
use crate::augmentation::{pool_features, pool_labels, AugmentConfig};
use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::metrics::{Evaluator, SegReport};
use crate::numerics::{he_uniform, Adam, DatasetStyle, Graph, OptimProfile, ParamStore, Phase, Tensor, UpsampleMode, Var};
use crate::supervised::{cross_entropy, predict};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub contrast: ContrastConfig,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: AugmentConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let p = OptimProfile::for_dataset(DatasetStyle::Gtea, Phase::Contrast);
        PretrainConfig {
            contrast: ContrastConfig::default(),
            epochs: p.epochs,
            lr: p.lr,
            weight_decay: p.weight_decay,
            batch_size: 8,
            augment: AugmentConfig {
                w0: 4,
                ..AugmentConfig::default()
            },
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.contrast.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.contrast.use_video_level && self.batch_size < 2 {
            return Err(Error::Config("video-level contrast needs batch_size >= 2".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// One video as seen by a contrast step: (possibly pooled) features `[T × F]`
/// and the per-frame ids that decide positives, which may be cluster ids,
/// pseudo-labels or ground truth.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub activity: usize,
}

/// Builds the contrastive loss for a batch in `g`. Returns the loss and the
/// number of frame-level positive pairs it averages over.
pub fn contrast_batch_loss<R: Rng + ?Sized>(
    model: &mut Model,
    g: &mut Graph,
    items: &[BatchItem],
    cfg: &ContrastConfig,
    rng: &mut R,
) -> Result<(Var, usize)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty contrast batch".into()));
    }
    let inputs: Vec<&Tensor> = items.iter().map(|i| &i.features).collect();
    let outs = model.features_batch(g, &inputs, Mode::Train)?;
    contrast_loss_from_outputs(g, &outs, items, cfg, rng)
}

/// [`contrast_batch_loss`] on decoder outputs already in `g`, one per item.
pub fn contrast_loss_from_outputs<R: Rng + ?Sized>(
    g: &mut Graph,
    outs: &[DecoderOutputs],
    items: &[BatchItem],
    cfg: &ContrastConfig,
    rng: &mut R,
) -> Result<(Var, usize)> {
    if items.is_empty() || outs.len() != items.len() {
        return Err(Error::InvalidArgument(format!(
            "{} decoder outputs for {} contrast items",
            outs.len(),
            items.len()
        )));
    }
    let depth = outs[0].z.len() as f64;
    let mut samples = Vec::new();
    let mut rows = Vec::with_capacity(items.len());
    let mut pooled = Vec::with_capacity(items.len());
    for (n, (item, out)) in items.iter().zip(outs).enumerate() {
        let t = item.features.dim(0);
        if item.labels.len() != t {
            return Err(Error::Shape(format!("{} labels for {t} frames", item.labels.len())));
        }
        let drawn = sample_frames(t, cfg, rng)?;
        let (picked, kept) = multires_columns(g, out, t, cfg.upsample_mode, &drawn.frames)?;
        if kept.len() < drawn.frames.len() {
            log::warn!(
                "dropped {} sampled frames with a zero decoder block",
                drawn.frames.len() - kept.len()
            );
        }
        rows.push(g.transpose(picked)?);
        if cfg.use_video_level {
            let f = multires_feature(g, out, t, cfg.upsample_mode)?;
            pooled.push(g.max_cols(f)?);
        }
        samples.extend(kept.iter().map(|&k| SampleInfo {
            video: n,
            time: drawn.times[k],
            label: item.labels[drawn.frames[k]],
            activity: item.activity,
        }));
    }
    let sets = build_sets(&samples, cfg.delta, cfg.use_video_level);
    let n_pairs = sets.num_pairs();
    let frame_term = if n_pairs > 0 {
        let x = g.concat(&rows)?;
        let xt = g.transpose(x)?;
        let dots = g.matmul(x, xt)?;
        // every f has `depth` unit blocks, so f·f' / depth is the cosine
        let sim = g.scale(dots, 1.0 / depth)?;
        Some(g.contrast_nll(sim, &sets.pairs(), &sets.negatives, cfg.tau)?)
    } else {
        None
    };
    let video_term = if cfg.use_video_level {
        let acts: Vec<usize> = items.iter().map(|i| i.activity).collect();
        video_contrast(g, &pooled, &acts, cfg.tau)?
    } else {
        None
    };
    let loss = match (frame_term, video_term) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(Error::InvalidArgument("no positive pairs in contrast batch".into())),
    };
    Ok((loss, n_pairs))
}

/// One optimizer step per batch of `order`; returns the mean batch loss.
pub(crate) fn contrast_epoch(
    model: &mut Model,
    items: &[BatchItem],
    order: &[usize],
    cfg: &ContrastConfig,
    batch_size: usize,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch_size) {
        let batch: Vec<BatchItem> = chunk.iter().map(|&i| items[i].clone()).collect();
        let mut g = Graph::new();
        let (loss, _) = contrast_batch_loss(model, &mut g, &batch, cfg, rng)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("contrastive loss".into()));
        }
        g.backward(loss)?;
        model.params_mut().accumulate_grads(&g);
        opt.step(model.params_mut());
        sum += value;
        batches += 1;
    }
    Ok(sum / batches.max(1) as f64)
}

/// Augmented view of each video with per-frame ids from `labels`.
pub(crate) fn augmented_items(
    videos: &[VideoSample],
    labels: &[Vec<usize>],
    augment: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchItem>> {
    videos
        .iter()
        .zip(labels)
        .map(|(v, y)| {
            let w = if augment.enabled {
                crate::augmentation::sample_window(augment, rng).min(v.len())
            } else {
                1
            };
            Ok(BatchItem {
                features: pool_features(&v.features, w)?,
                labels: pool_labels(y, w)?,
                activity: v.activity,
            })
        })
        .collect()
}

/// Replaces the labels of each batch with k-means cluster ids of its frames.
fn cluster_batches(items: &mut [BatchItem], order: &[usize], batch_size: usize, k: usize, seed: u64) -> Result<()> {
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        let f = items[chunk[0]].features.dim(1);
        let mut data = Vec::new();
        for &i in chunk {
            data.extend_from_slice(items[i].features.data());
        }
        let n = data.len() / f;
        let km = kmeans(&Tensor::new(vec![n, f], data)?, k.min(n), seed.wrapping_add(b as u64))?;
        let mut at = 0;
        for &i in chunk {
            let t = items[i].features.dim(0);
            items[i].labels = km.assignments[at..at + t].to_vec();
            at += t;
        }
    }
    Ok(())
}

/// Contrastive pretraining of the backbone with per-batch cluster ids in
/// place of labels; the segmentation heads are not touched. Returns the mean
/// loss per epoch.
pub fn pretrain_unsupervised(
    model: &mut Model,
    videos: &[VideoSample],
    num_classes: usize,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::InvalidArgument("no videos to pretrain on".into()));
    }
    if cfg.contrast.use_video_level && videos.len() < 2 {
        return Err(Error::InvalidArgument("video-level contrast needs at least 2 videos".into()));
    }
    let k = cfg.contrast.clusters(num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let placeholder: Vec<Vec<usize>> = videos.iter().map(|v| vec![0; v.len()]).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut items = augmented_items(videos, &placeholder, &cfg.augment, &mut rng)?;
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        cluster_batches(&mut items, &order, cfg.batch_size, k, rng.random())?;
        let mean = contrast_epoch(model, &items, &order, &cfg.contrast, cfg.batch_size, &mut opt, &mut rng)?;
        log::debug!("pretrain epoch {epoch}: loss {mean:.4}");
        trace.push(mean);
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearEvalConfig {
    /// Full-batch optimizer steps.
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub upsample_mode: UpsampleMode,
}

impl Default for LinearEvalConfig {
    fn default() -> Self {
        LinearEvalConfig {
            epochs: 300,
            lr: 1e-2,
            weight_decay: 0.0,
            upsample_mode: UpsampleMode::Linear,
        }
    }
}

/// `repr` maps pooled features `[T' × F]` to a frozen representation `[D × T']`.
fn fit_and_score(
    repr: &dyn Fn(&Tensor) -> Result<Tensor>,
    train: &[VideoSample],
    test: &[VideoSample],
    num_classes: usize,
    window: usize,
    cfg: &LinearEvalConfig,
    seed: u64,
) -> Result<SegReport> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("linear evaluation needs training videos".into()));
    }
    let mut cols = Vec::new();
    let mut labels = Vec::new();
    let mut d = 0;
    for v in train {
        let w = window.min(v.len());
        let f = repr(&pool_features(&v.features, w)?)?;
        d = f.dim(0);
        cols.push(f);
        labels.extend(pool_labels(&v.labels, w)?);
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Data(format!("label {bad} outside {num_classes} classes")));
    }
    let n = labels.len();
    let mut x = vec![0.0; d * n];
    let mut at = 0;
    for f in &cols {
        let t = f.dim(1);
        for r in 0..d {
            x[r * n + at..r * n + at + t].copy_from_slice(f.row(r));
        }
        at += t;
    }
    let x = Tensor::new(vec![d, n], x)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let wid = store.add("linear.weight", he_uniform(&mut rng, &[num_classes, d, 1], d), true);
    let bid = store.add("linear.bias", Tensor::zeros(&[num_classes]), true);
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let apply = |store: &ParamStore, g: &mut Graph, input: Var| -> Result<Var> {
        let w = store.bind(g, wid)?;
        let b = store.bind(g, bid)?;
        let logits = g.conv1d(input, w, b, 0)?;
        g.softmax(logits)
    };
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let input = g.constant(x.clone())?;
        let p = apply(&store, &mut g, input)?;
        let loss = cross_entropy(&mut g, p, &labels)?;
        g.backward(loss)?;
        store.accumulate_grads(&g);
        opt.step(&mut store);
    }

    let mut ev = Evaluator::default();
    for v in test {
        let t = v.len();
        let f = repr(&pool_features(&v.features, window.min(t))?)?;
        let mut g = Graph::new();
        let input = g.constant(f)?;
        let p = apply(&store, &mut g, input)?;
        let p = g.upsample1d(p, t, cfg.upsample_mode)?;
        ev.add(&predict(&g.value(p).transpose()), &v.labels)?;
    }
    ev.report()
}

/// Trains an affine softmax classifier on the frozen multi-resolution
/// features of `model` and scores it on `test`. Videos are pooled with
/// `window` before the forward pass; predictions are upsampled back to the
/// full length.
pub fn linear_eval(
    model: &Model,
    train: &[VideoSample],
    test: &[VideoSample],
    window: usize,
    cfg: &LinearEvalConfig,
    seed: u64,
) -> Result<SegReport> {
    let mode = cfg.upsample_mode;
    let repr = |v: &Tensor| {
        let mut g = Graph::new();
        let out = model.features_eval(&mut g, v)?;
        let f = multires_feature(&mut g, &out, v.dim(0), mode)?;
        Ok(g.value(f).clone())
    };
    fit_and_score(&repr, train, test, model.config().num_classes, window, cfg, seed)
}

/// The same classifier trained directly on the (pooled) input features.
pub fn linear_eval_raw(
    train: &[VideoSample],
    test: &[VideoSample],
    num_classes: usize,
    window: usize,
    cfg: &LinearEvalConfig,
    seed: u64,
) -> Result<SegReport> {
    let repr = |v: &Tensor| Ok(v.transpose());
    fit_and_score(&repr, train, test, num_classes, window, cfg, seed)
}
