//! Command-line front end. Each subcommand reads an optional JSON config
//! whose keys are the long flag names; flags given on the command line win.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::architecture::{Model, ModelConfig};
use crate::augmentation::AugmentConfig;
use crate::contrastive::{linear_eval, linear_eval_raw, pretrain_unsupervised, ContrastConfig, LinearEvalConfig, PretrainConfig};
use crate::data::{gen_synthetic, load_checkpoint, make_split, save_checkpoint, Checkpoint, Dataset, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::icc::{run_icc, AuditedDataset, ICCConfig};
use crate::metrics::{calibration, entropy_histogram, histogram_csv, wrong_entropy, SegReport};
use crate::numerics::{Tensor, UpsampleMode};
use crate::supervised::{
    evaluate_activity, evaluate_model, predict_video, train_activity, train_supervised, EnsembleWeights, LossRecord, TrainConfig,
};

trait Merge {
    fn merge(self, file: Self) -> Self;
}

impl<T> Merge for Option<T> {
    fn merge(self, file: Self) -> Self {
        self.or(file)
    }
}

impl Merge for bool {
    fn merge(self, file: Self) -> Self {
        self || file
    }
}

/// Declares a flag struct that doubles as its JSON config schema.
macro_rules! options {
    ($(#[$m:meta])* struct $name:ident { $($(#[$fm:meta])* $f:ident: $t:ty,)* }) => {
        $(#[$m])*
        #[derive(clap::Args, Debug, Default, Deserialize)]
        #[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
        pub struct $name {
            /// JSON file with defaults for any of these flags.
            #[arg(long)]
            #[serde(skip)]
            config: Option<PathBuf>,
            $($(#[$fm])* $f: $t,)*
        }

        impl $name {
            fn resolve(self) -> Result<Self> {
                let Some(path) = self.config.clone() else {
                    return Ok(self);
                };
                let file: $name = read_json(&path)?;
                Ok($name { config: self.config, $($f: Merge::merge(self.$f, file.$f),)* })
            }
        }
    };
}

options! {
    struct GenSynthArgs {
        /// Output directory.
        #[arg(long)] out: Option<PathBuf>,
        /// Master seed; model, sampler and split streams derive from it.
        #[arg(long)] seed: Option<u64>,
        /// Number of videos.
        #[arg(long)] num_videos: Option<usize>,
        /// Number of action classes.
        #[arg(long)] num_actions: Option<usize>,
        /// Number of complex activities.
        #[arg(long)] num_activities: Option<usize>,
        /// Feature dimension per frame.
        #[arg(long)] feat_dim: Option<usize>,
        /// Shortest video length in frames.
        #[arg(long)] t_min: Option<usize>,
        /// Longest video length in frames.
        #[arg(long)] t_max: Option<usize>,
        /// Fewest segments per video.
        #[arg(long)] segments_min: Option<usize>,
        /// Most segments per video.
        #[arg(long)] segments_max: Option<usize>,
        /// Frame noise around the action mean.
        #[arg(long)] sigma_within: Option<f64>,
        /// Spread of the action means.
        #[arg(long)] sigma_between: Option<f64>,
        /// Half-width of the moving-average smoother.
        #[arg(long)] smoothing_radius: Option<usize>,
        /// Probability a frame is drawn from another action.
        #[arg(long)] noise_rate: Option<f64>,
        /// Probability of skipping an action along the cycle.
        #[arg(long)] skip_prob: Option<f64>,
        /// Fraction of videos in the test split.
        #[arg(long)] test_fraction: Option<f64>,
    }
}

options! {
    struct TrainArgs {
        /// Dataset directory.
        #[arg(long)] data: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)] out: Option<PathBuf>,
        /// Start from this checkpoint's backbone (e.g. a pretrained one).
        #[arg(long)] init: Option<PathBuf>,
        /// Per-epoch losses as CSV.
        #[arg(long)] loss_csv: Option<PathBuf>,
        /// Master seed; model, sampler and split streams derive from it.
        #[arg(long)] seed: Option<u64>,
        /// Training epochs.
        #[arg(long)] epochs: Option<usize>,
        /// Learning rate.
        #[arg(long)] lr: Option<f64>,
        /// Decoupled weight decay.
        #[arg(long)] weight_decay: Option<f64>,
        /// Videos per optimizer step.
        #[arg(long)] batch_size: Option<usize>,
        /// Base pooling window of the feature augmentation.
        #[arg(long)] w0: Option<usize>,
        /// Weight of the transition term.
        #[arg(long)] lambda_tr: Option<f64>,
        /// Train on full-resolution features without augmentation.
        #[arg(long)] no_augment: bool,
        /// Loss on every decoder output instead of the ensemble.
        #[arg(long)] loss_per_layer: bool,
        /// Learn the ensemble weights.
        #[arg(long)] learned_alpha: bool,
        /// Drop the encoder-decoder skip connections.
        #[arg(long)] no_skip: bool,
        /// Convolution kernel size.
        #[arg(long)] kernel: Option<usize>,
        /// Number of encoder/decoder stages.
        #[arg(long)] depth: Option<usize>,
        /// Uniform channel width instead of the published channel plan.
        #[arg(long)] width: Option<usize>,
        /// Upsampling mode: linear or nearest.
        #[arg(long)] upsample: Option<UpsampleMode>,
    }
}

options! {
    struct PretrainArgs {
        /// Dataset directory.
        #[arg(long)] data: Option<PathBuf>,
        /// Output path.
        #[arg(long)] out: Option<PathBuf>,
        /// Per-epoch losses as CSV.
        #[arg(long)] loss_csv: Option<PathBuf>,
        /// Master seed; model, sampler and split streams derive from it.
        #[arg(long)] seed: Option<u64>,
        /// Training epochs.
        #[arg(long)] epochs: Option<usize>,
        /// Learning rate.
        #[arg(long)] lr: Option<f64>,
        /// Decoupled weight decay.
        #[arg(long)] weight_decay: Option<f64>,
        /// Videos per optimizer step.
        #[arg(long)] batch_size: Option<usize>,
        /// Base pooling window of the feature augmentation.
        #[arg(long)] w0: Option<usize>,
        /// Disable the feature augmentation.
        #[arg(long)] no_augment: bool,
        /// Sampling partitions per video.
        #[arg(long)] k: Option<usize>,
        /// Temporal proximity threshold for positives, in normalized time.
        #[arg(long)] delta: Option<f64>,
        /// Contrast temperature.
        #[arg(long)] tau: Option<f64>,
        /// Clusters per batch (default twice the number of actions).
        #[arg(long)] clusters: Option<usize>,
        /// Add the video-level contrast term.
        #[arg(long)] video_level: bool,
        /// Drop the encoder-decoder skip connections.
        #[arg(long)] no_skip: bool,
        /// Convolution kernel size.
        #[arg(long)] kernel: Option<usize>,
        /// Number of encoder/decoder stages.
        #[arg(long)] depth: Option<usize>,
        /// Uniform channel width instead of the published channel plan.
        #[arg(long)] width: Option<usize>,
        /// Upsampling mode: linear or nearest.
        #[arg(long)] upsample: Option<UpsampleMode>,
    }
}

options! {
    struct IccArgs {
        /// Dataset directory.
        #[arg(long)] data: Option<PathBuf>,
        /// Output directory for reports, split and final checkpoint.
        #[arg(long)] out: Option<PathBuf>,
        /// Fraction of training videos that keep their labels.
        #[arg(long)] labeled_frac: Option<f64>,
        /// ICC iterations.
        #[arg(long)] iters: Option<usize>,
        /// Start from the untrained backbone instead of cluster-label pretraining.
        #[arg(long)] skip_unsupervised: bool,
        /// Master seed; model, sampler and split streams derive from it.
        #[arg(long)] seed: Option<u64>,
        /// Learning rate of the classifier heads.
        #[arg(long)] lr_g: Option<f64>,
        /// Backbone learning rate during classification.
        #[arg(long)] lr_m_classify: Option<f64>,
        /// Backbone learning rate during contrastive steps.
        #[arg(long)] lr_m_contrast: Option<f64>,
        /// Decoupled weight decay.
        #[arg(long)] weight_decay: Option<f64>,
        /// Epochs per classification step.
        #[arg(long)] classify_epochs: Option<usize>,
        /// Labeled videos per classification batch.
        #[arg(long)] classify_batch_size: Option<usize>,
        /// Epochs per contrastive step.
        #[arg(long)] contrast_epochs: Option<usize>,
        /// Epochs of the initial unsupervised pretraining.
        #[arg(long)] pretrain_epochs: Option<usize>,
        /// Videos per contrastive batch.
        #[arg(long)] contrast_batch_size: Option<usize>,
        /// Add the transition term to the classification loss.
        #[arg(long)] include_transition: bool,
        /// Base pooling window of the feature augmentation.
        #[arg(long)] w0: Option<usize>,
        /// Sampling partitions per video.
        #[arg(long)] k: Option<usize>,
        /// Temporal proximity threshold for positives, in normalized time.
        #[arg(long)] delta: Option<f64>,
        /// Contrast temperature.
        #[arg(long)] tau: Option<f64>,
        /// Drop the encoder-decoder skip connections.
        #[arg(long)] no_skip: bool,
        /// Convolution kernel size.
        #[arg(long)] kernel: Option<usize>,
        /// Number of encoder/decoder stages.
        #[arg(long)] depth: Option<usize>,
        /// Uniform channel width instead of the published channel plan.
        #[arg(long)] width: Option<usize>,
        /// Upsampling mode: linear or nearest.
        #[arg(long)] upsample: Option<UpsampleMode>,
    }
}

options! {
    struct EvalArgs {
        /// Checkpoint path.
        #[arg(long)] ckpt: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)] data: Option<PathBuf>,
        /// Dataset split: train or test.
        #[arg(long)] split: Option<Split>,
        /// Also score test-time augmentation and report the MoF change.
        #[arg(long)] tta: bool,
        /// Sampled windows per video for test-time augmentation.
        #[arg(long)] tta_samples: Option<usize>,
        /// Master seed; model, sampler and split streams derive from it.
        #[arg(long)] seed: Option<u64>,
        /// JSON report path.
        #[arg(long)] report: Option<PathBuf>,
    }
}

options! {
    struct LinearEvalArgs {
        /// Checkpoint path.
        #[arg(long)] ckpt: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)] data: Option<PathBuf>,
        /// JSON report path.
        #[arg(long)] report: Option<PathBuf>,
        /// Also fit the classifier on raw input features.
        #[arg(long)] raw_baseline: bool,
        /// Training epochs.
        #[arg(long)] epochs: Option<usize>,
        /// Learning rate.
        #[arg(long)] lr: Option<f64>,
        /// Decoupled weight decay.
        #[arg(long)] weight_decay: Option<f64>,
        /// Pooling window (default: the checkpoint's inference window).
        #[arg(long)] window: Option<usize>,
        /// Master seed; model, sampler and split streams derive from it.
        #[arg(long)] seed: Option<u64>,
    }
}

options! {
    struct CalibrateArgs {
        /// Checkpoint path.
        #[arg(long)] ckpt: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)] data: Option<PathBuf>,
        /// Dataset split: train or test.
        #[arg(long)] split: Option<Split>,
        /// Number of confidence bins.
        #[arg(long)] bins: Option<usize>,
        /// Reliability table CSV.
        #[arg(long)] out: Option<PathBuf>,
        /// Entropy histogram of misclassified frames, CSV.
        #[arg(long)] entropy_out: Option<PathBuf>,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ActivityMode {
    Train,
    Eval,
}

options! {
    struct ActivityArgs {
        /// Dataset directory.
        #[arg(long)] data: Option<PathBuf>,
        /// Checkpoint to write (train) or read (eval).
        #[arg(long)] ckpt: Option<PathBuf>,
        /// JSON report path.
        #[arg(long)] report: Option<PathBuf>,
        /// Master seed; model, sampler and split streams derive from it.
        #[arg(long)] seed: Option<u64>,
        /// Training epochs.
        #[arg(long)] epochs: Option<usize>,
        /// Learning rate.
        #[arg(long)] lr: Option<f64>,
        /// Decoupled weight decay.
        #[arg(long)] weight_decay: Option<f64>,
        /// Videos per optimizer step.
        #[arg(long)] batch_size: Option<usize>,
        /// Base pooling window of the feature augmentation.
        #[arg(long)] w0: Option<usize>,
        /// Disable the feature augmentation.
        #[arg(long)] no_augment: bool,
        /// Drop the encoder-decoder skip connections.
        #[arg(long)] no_skip: bool,
        /// Convolution kernel size.
        #[arg(long)] kernel: Option<usize>,
        /// Number of encoder/decoder stages.
        #[arg(long)] depth: Option<usize>,
        /// Uniform channel width instead of the published channel plan.
        #[arg(long)] width: Option<usize>,
        /// Upsampling mode: linear or nearest.
        #[arg(long)] upsample: Option<UpsampleMode>,
    }
}

#[derive(Parser, Debug)]
#[command(name = "c2f", version, about = "Temporal action segmentation with a coarse-to-fine TCN")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory.
    GenSynth(GenSynthArgs),
    /// Supervised training.
    Train(TrainArgs),
    /// Unsupervised contrastive pretraining of the backbone.
    Pretrain(PretrainArgs),
    /// Semi-supervised Iterative-Contrast-Classify.
    Icc(IccArgs),
    /// Segmentation metrics of a checkpoint.
    Eval(EvalArgs),
    /// Linear classifier on frozen multi-resolution features.
    LinearEval(LinearEvalArgs),
    /// Reliability bins and misclassification entropy.
    Calibrate(CalibrateArgs),
    /// Complex-activity recognition.
    Activity {
        mode: ActivityMode,
        #[command(flatten)]
        args: ActivityArgs,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| {
        let msg = format!("{}: {e}", path.display());
        if e.is_data() {
            Error::Config(msg)
        } else {
            Error::Format(msg)
        }
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::InvalidArgument(format!("missing --{flag}")))
}

/// Named sub-stream of the master seed, so that e.g. the model init does not
/// shift when the sampler draws more numbers.
pub fn substream(seed: u64, name: &str) -> u64 {
    let tag = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    ChaCha8Rng::seed_from_u64(seed ^ tag).next_u64()
}

struct ModelFlags {
    no_skip: bool,
    kernel: Option<usize>,
    depth: Option<usize>,
    width: Option<usize>,
    upsample: Option<UpsampleMode>,
}

impl ModelFlags {
    fn build(&self, data: &Dataset, num_activities: usize) -> Result<ModelConfig> {
        let depth = self.depth.unwrap_or(6);
        let base = match self.width {
            Some(w) => ModelConfig::uniform(data.feat_dim(), data.num_classes(), depth, w),
            None => ModelConfig {
                input_dim: data.feat_dim(),
                num_classes: data.num_classes(),
                ..ModelConfig::default()
            }
            .with_depth(depth),
        };
        let cfg = ModelConfig {
            kernel: self.kernel.unwrap_or(base.kernel),
            upsample_mode: self.upsample.unwrap_or(base.upsample_mode),
            skip_connections: !self.no_skip,
            num_activities,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn augment_from(w0: Option<usize>, no_augment: bool, base: AugmentConfig) -> AugmentConfig {
    AugmentConfig {
        w0: w0.unwrap_or(base.w0),
        enabled: !no_augment,
        ..base
    }
}

fn load_data(dir: Option<PathBuf>) -> Result<Dataset> {
    Dataset::load(&required(dir, "data")?)
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let a = a.resolve()?;
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        num_videos: a.num_videos.unwrap_or(d.num_videos),
        num_actions: a.num_actions.unwrap_or(d.num_actions),
        num_activities: a.num_activities.unwrap_or(d.num_activities),
        feat_dim: a.feat_dim.unwrap_or(d.feat_dim),
        t_min: a.t_min.unwrap_or(d.t_min),
        t_max: a.t_max.unwrap_or(d.t_max),
        segments_min: a.segments_min.unwrap_or(d.segments_min),
        segments_max: a.segments_max.unwrap_or(d.segments_max),
        sigma_within: a.sigma_within.unwrap_or(d.sigma_within),
        sigma_between: a.sigma_between.unwrap_or(d.sigma_between),
        smoothing_radius: a.smoothing_radius.unwrap_or(d.smoothing_radius),
        noise_rate: a.noise_rate.unwrap_or(d.noise_rate),
        skip_prob: a.skip_prob.unwrap_or(d.skip_prob),
        test_fraction: a.test_fraction.unwrap_or(d.test_fraction),
        seed: a.seed.unwrap_or(d.seed),
    };
    let out = required(a.out, "out")?;
    let manifest = gen_synthetic(&cfg, &out)?;
    println!("wrote {} videos to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let a = a.resolve()?;
    let data = load_data(a.data)?;
    let out = required(a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        loss: crate::supervised::LossConfig {
            lambda_tr: a.lambda_tr.unwrap_or(d.loss.lambda_tr),
            ..d.loss.clone()
        },
        augment: augment_from(a.w0, a.no_augment, d.augment.clone()),
        loss_per_layer: a.loss_per_layer,
        learned_alpha: a.learned_alpha,
    };
    let mut model = match &a.init {
        Some(path) => load_checkpoint(path)?.model,
        None => {
            let flags = ModelFlags { no_skip: a.no_skip, kernel: a.kernel, depth: a.depth, width: a.width, upsample: a.upsample };
            Model::new(flags.build(&data, 0)?, substream(seed, "model"))?
        }
    };
    let outcome = train_supervised(&mut model, &data.train, &cfg, substream(seed, "sampler"))?;
    if let Some(path) = &a.loss_csv {
        write_file(path, LossRecord::csv(&outcome.trace).as_bytes())?;
    }
    save_checkpoint(&out, &Checkpoint { model, alpha: outcome.alpha, augment: cfg.augment })?;
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.total);
    println!("trained {} epochs, final loss {last:.6}, checkpoint {}", cfg.epochs, out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let a = a.resolve()?;
    let data = load_data(a.data)?;
    let out = required(a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let d = PretrainConfig::default();
    let cfg = PretrainConfig {
        contrast: ContrastConfig {
            k: a.k.unwrap_or(d.contrast.k),
            delta: a.delta.unwrap_or(d.contrast.delta),
            tau: a.tau.unwrap_or(d.contrast.tau),
            num_clusters: a.clusters.or(d.contrast.num_clusters),
            use_video_level: a.video_level,
            ..d.contrast.clone()
        },
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        augment: augment_from(a.w0, a.no_augment, d.augment.clone()),
    };
    let flags = ModelFlags { no_skip: a.no_skip, kernel: a.kernel, depth: a.depth, width: a.width, upsample: a.upsample };
    let mut model = Model::new(flags.build(&data, 0)?, substream(seed, "model"))?;
    let trace = pretrain_unsupervised(&mut model, &data.train, data.num_classes(), &cfg, substream(seed, "sampler"))?;
    if let Some(path) = &a.loss_csv {
        let mut s = String::from("epoch,loss\n");
        for (e, l) in trace.iter().enumerate() {
            s.push_str(&format!("{e},{l}\n"));
        }
        write_file(path, s.as_bytes())?;
    }
    let alpha = EnsembleWeights::uniform(model.config().depth);
    save_checkpoint(&out, &Checkpoint { model, alpha, augment: cfg.augment })?;
    println!("pretrained {} epochs, checkpoint {}", cfg.epochs, out.display());
    Ok(())
}

fn icc(a: IccArgs) -> Result<()> {
    let a = a.resolve()?;
    let data = load_data(a.data)?;
    let out = required(a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let d = ICCConfig::default();
    let cfg = ICCConfig {
        iterations: a.iters.unwrap_or(d.iterations),
        labeled_fraction: a.labeled_frac.unwrap_or(d.labeled_fraction),
        lr_g: a.lr_g.unwrap_or(d.lr_g),
        lr_m_classify: a.lr_m_classify.unwrap_or(d.lr_m_classify),
        lr_m_contrast: a.lr_m_contrast.unwrap_or(d.lr_m_contrast),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        classify_epochs: a.classify_epochs.unwrap_or(d.classify_epochs),
        classify_batch_size: a.classify_batch_size.unwrap_or(d.classify_batch_size),
        contrast_epochs: a.contrast_epochs.unwrap_or(d.contrast_epochs),
        pretrain_epochs: a.pretrain_epochs.unwrap_or(d.pretrain_epochs),
        contrast_batch_size: a.contrast_batch_size.unwrap_or(d.contrast_batch_size),
        contrast: ContrastConfig {
            k: a.k.unwrap_or(d.contrast.k),
            delta: a.delta.unwrap_or(d.contrast.delta),
            tau: a.tau.unwrap_or(d.contrast.tau),
            ..d.contrast.clone()
        },
        augment: augment_from(a.w0, false, d.augment.clone()),
        include_transition: a.include_transition,
        skip_unsupervised: a.skip_unsupervised,
        seed: substream(seed, "sampler"),
        ..d
    };
    cfg.validate()?;
    let split = make_split(&data.train, data.num_classes(), cfg.labeled_fraction, substream(seed, "split"))?;
    let audited = AuditedDataset::new(&data.train, &split)?;
    let flags = ModelFlags { no_skip: a.no_skip, kernel: a.kernel, depth: a.depth, width: a.width, upsample: a.upsample };
    let mut model = Model::new(flags.build(&data, 0)?, substream(seed, "model"))?;
    let reports = run_icc(&mut model, &audited, &data.test, &cfg)?;
    write_json(&out.join("split.json"), &split)?;
    for r in &reports {
        write_json(&out.join(format!("icc_{}.json", r.iteration)), r)?;
    }
    let alpha = EnsembleWeights::uniform(model.config().depth);
    save_checkpoint(&out.join("model.ckpt"), &Checkpoint { model, alpha, augment: cfg.augment })?;
    if let Some(last) = reports.last() {
        println!("ICC_{}: test MoF {:.2}, reports in {}", last.iteration, last.test.mof, out.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    split: Split,
    report: SegReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    tta: Option<SegReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tta_mof_delta: Option<f64>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let a = a.resolve()?;
    let ck = load_checkpoint(&required(a.ckpt, "ckpt")?)?;
    let data = load_data(a.data)?;
    let split = a.split.unwrap_or(Split::Test);
    let videos = data.split(split);
    if videos.is_empty() {
        return Err(Error::Data(format!("no {split:?} videos in the dataset").to_lowercase()));
    }
    let (report, _) = evaluate_model(&ck.model, videos, &ck.alpha, &ck.augment, None)?;
    let tta = if a.tta {
        let augment = AugmentConfig {
            tta_samples: a.tta_samples.unwrap_or(ck.augment.tta_samples),
            enabled: true,
            ..ck.augment.clone()
        };
        Some(evaluate_model(&ck.model, videos, &ck.alpha, &augment, Some(substream(a.seed.unwrap_or(0), "tta")))?.0)
    } else {
        None
    };
    let out = EvalReport {
        split,
        tta_mof_delta: tta.as_ref().map(|t| t.mof - report.mof),
        report,
        tta,
    };
    println!("MoF {:.2} Edit {:.2} F1@50 {:.2}", out.report.mof, out.report.edit, out.report.f1_50);
    if let Some(path) = &a.report {
        write_json(path, &out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct LinearEvalReport {
    window: usize,
    pretrained: SegReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    raw: Option<SegReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mof_gain: Option<f64>,
}

fn linear(a: LinearEvalArgs) -> Result<()> {
    let a = a.resolve()?;
    let ck = load_checkpoint(&required(a.ckpt, "ckpt")?)?;
    let data = load_data(a.data)?;
    let d = LinearEvalConfig::default();
    let cfg = LinearEvalConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        ..d
    };
    let window = a.window.unwrap_or(ck.augment.inference_window());
    let seed = substream(a.seed.unwrap_or(0), "linear");
    let pretrained = linear_eval(&ck.model, &data.train, &data.test, window, &cfg, seed)?;
    let raw = if a.raw_baseline {
        Some(linear_eval_raw(&data.train, &data.test, data.num_classes(), window, &cfg, seed)?)
    } else {
        None
    };
    let out = LinearEvalReport {
        window,
        mof_gain: raw.as_ref().map(|r| pretrained.mof - r.mof),
        pretrained,
        raw,
    };
    println!("linear-eval MoF {:.2}", out.pretrained.mof);
    if let Some(path) = &a.report {
        write_json(path, &out)?;
    }
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let a = a.resolve()?;
    let ck = load_checkpoint(&required(a.ckpt, "ckpt")?)?;
    let data = load_data(a.data)?;
    let bins = a.bins.unwrap_or(10);
    let videos = data.split(a.split.unwrap_or(Split::Test));
    let c = data.num_classes();
    let mut rows = Vec::new();
    let mut gt = Vec::new();
    for v in videos {
        let p = predict_video(&ck.model, &v.features, &ck.alpha, &ck.augment)?;
        rows.extend_from_slice(p.data());
        gt.extend_from_slice(&v.labels);
    }
    if gt.is_empty() {
        return Err(Error::Data("no frames to calibrate on".into()));
    }
    let p = Tensor::new(vec![gt.len(), c], rows)?;
    let report = calibration(&p, &gt, bins)?;
    write_file(&required(a.out, "out")?, report.to_csv().as_bytes())?;
    if let Some(path) = &a.entropy_out {
        let ent = wrong_entropy(&p, &gt)?;
        write_file(path, histogram_csv(&entropy_histogram(&ent, bins, (c as f64).ln())).as_bytes())?;
    }
    println!("calibrated {} frames into {bins} bins", report.frames);
    Ok(())
}

fn activity(mode: ActivityMode, a: ActivityArgs) -> Result<()> {
    let a = a.resolve()?;
    let data = load_data(a.data)?;
    let ckpt = required(a.ckpt, "ckpt")?;
    match mode {
        ActivityMode::Train => {
            let seed = a.seed.unwrap_or(0);
            let d = TrainConfig::default();
            let cfg = TrainConfig {
                epochs: a.epochs.unwrap_or(d.epochs),
                lr: a.lr.unwrap_or(d.lr),
                weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
                batch_size: a.batch_size.unwrap_or(d.batch_size),
                augment: augment_from(a.w0, a.no_augment, d.augment.clone()),
                ..d
            };
            let flags = ModelFlags { no_skip: a.no_skip, kernel: a.kernel, depth: a.depth, width: a.width, upsample: a.upsample };
            let num_activities = data.num_activities();
            if num_activities < 2 {
                return Err(Error::Data("activity recognition needs at least two activities".into()));
            }
            let mut model = Model::new(flags.build(&data, num_activities)?, substream(seed, "model"))?;
            let trace = train_activity(&mut model, &data.train, &cfg, substream(seed, "sampler"))?;
            let alpha = EnsembleWeights::uniform(model.config().depth);
            save_checkpoint(&ckpt, &Checkpoint { model, alpha, augment: cfg.augment })?;
            let last = trace.last().map_or(f64::NAN, |r| r.total);
            println!("trained activity head, final loss {last:.6}, checkpoint {}", ckpt.display());
        }
        ActivityMode::Eval => {
            let ck = load_checkpoint(&ckpt)?;
            let report = evaluate_activity(&ck.model, &data.test, &ck.augment)?;
            println!("activity accuracy {:.2} on {} videos", report.accuracy, report.videos);
            if let Some(path) = &a.report {
                write_json(path, &report)?;
            }
        }
    }
    Ok(())
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Icc(a) => icc(a),
        Command::Eval(a) => eval(a),
        Command::LinearEval(a) => linear(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Activity { mode, args } => activity(mode, args),
    }
}

/// One-line error as printed on stderr.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error kind={} code={}: {msg}", e.kind(), e.exit_code())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", error_line(&Error::InvalidArgument(first)));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            e.exit_code()
        }
    }
}

