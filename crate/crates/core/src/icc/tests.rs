use super::*;
use crate::architecture::ModelConfig;
use crate::data::{generate, make_split, Split, SyntheticConfig};
use crate::metrics::Evaluator;
use crate::numerics::ParamStore;

fn toy_data() -> (Vec<VideoSample>, Vec<VideoSample>) {
    let all = generate(&SyntheticConfig {
        num_videos: 12,
        feat_dim: 8,
        t_min: 48,
        t_max: 64,
        segments_min: 2,
        segments_max: 4,
        test_fraction: 0.25,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let part = |s: Split| all.iter().filter(|(_, x)| *x == s).map(|(v, _)| v.clone()).collect::<Vec<_>>();
    (part(Split::Train), part(Split::Test))
}

fn toy_model() -> Model {
    Model::new(ModelConfig::uniform(8, 6, 3, 16), 1).unwrap()
}

fn toy_cfg() -> ICCConfig {
    ICCConfig {
        iterations: 2,
        labeled_fraction: 0.3,
        classify_epochs: 3,
        classify_batch_size: 2,
        contrast_epochs: 2,
        pretrain_epochs: 2,
        contrast_batch_size: 4,
        contrast: ContrastConfig {
            k: 6,
            delta: 0.3,
            ..ContrastConfig::default()
        },
        augment: AugmentConfig {
            w0: 2,
            ..AugmentConfig::default()
        },
        ..ICCConfig::default()
    }
}

fn audited(train: &[VideoSample], frac: f64) -> AuditedDataset {
    let split = make_split(train, 6, frac, 3).unwrap();
    AuditedDataset::new(train, &split).unwrap()
}

fn trainable(s: &ParamStore) -> Vec<Vec<f64>> {
    s.iter().filter(|p| p.trainable).map(|p| p.value.data().to_vec()).collect()
}

#[test]
fn config_validation() {
    assert!(ICCConfig::default().validate().is_ok());
    let cases = [
        ICCConfig { iterations: 0, ..ICCConfig::default() },
        ICCConfig { labeled_fraction: 0.0, ..ICCConfig::default() },
        ICCConfig { labeled_fraction: 1.5, ..ICCConfig::default() },
        ICCConfig { lr_m_classify: 5e-3, ..ICCConfig::default() },
        ICCConfig { lr_g: -1.0, ..ICCConfig::default() },
        ICCConfig { classify_batch_size: 0, ..ICCConfig::default() },
        ICCConfig {
            contrast: ContrastConfig { use_video_level: true, ..ContrastConfig::default() },
            ..ICCConfig::default()
        },
    ];
    for c in cases {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn audited_dataset_checks_the_split() {
    let (train, _) = toy_data();
    let mut split = make_split(&train, 6, 0.3, 0).unwrap();
    let d = AuditedDataset::new(&train, &split).unwrap();
    assert_eq!(d.num_labeled() + d.num_unlabeled(), train.len());
    assert_eq!(d.label_reads(), LabelReads::default());
    d.labeled_labels(0);
    d.unlabeled_labels(0);
    d.unlabeled_labels(1);
    assert_eq!(d.label_reads(), LabelReads { labeled: 1, unlabeled: 2 });

    let moved = split.unlabeled.pop().unwrap();
    assert!(AuditedDataset::new(&train, &split).is_err());
    split.labeled.push(moved.clone());
    split.unlabeled.push(moved);
    assert!(AuditedDataset::new(&train, &split).is_err());
    split.unlabeled.pop();
    split.labeled.push("nope".into());
    assert!(AuditedDataset::new(&train, &split).is_err());
}

#[test]
fn classify_step_needs_labeled_videos() {
    let (train, _) = toy_data();
    let split = SplitSpec {
        labeled: vec![],
        unlabeled: train.iter().map(|v| v.id.clone()).collect(),
        seed: 0,
        covers_all_classes: false,
    };
    let d = AuditedDataset::new(&train, &split).unwrap();
    let err = classify_step(&mut toy_model(), &d, &toy_cfg(), 0).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn frozen_backbone_still_trains_fresh_heads() {
    let (train, _) = toy_data();
    let d = audited(&train, 0.3);
    let mut m = toy_model();
    let backbone = trainable(m.params());
    let heads = trainable(m.heads.params());
    let cfg = ICCConfig { lr_m_classify: 0.0, ..toy_cfg() };
    classify_step(&mut m, &d, &cfg, 0).unwrap();
    assert_eq!(trainable(m.params()), backbone);
    assert_ne!(trainable(m.heads.params()), heads);
}

#[test]
fn classify_step_improves_labeled_fit_and_reads_only_labeled() {
    let (train, _) = toy_data();
    let d = audited(&train, 0.3);
    let mut m = toy_model();
    let cfg = ICCConfig { classify_epochs: 40, lr_m_classify: 1e-3, ..toy_cfg() };
    let labeled: Vec<VideoSample> = (0..d.num_labeled())
        .map(|i| VideoSample::new(format!("l{i}"), d.labeled_features(i).clone(), d.labeled[i].labels.clone(), 0).unwrap())
        .collect();
    let alpha = EnsembleWeights::uniform(3);
    let (before, _) = evaluate_model(&m, &labeled, &alpha, &cfg.augment, None).unwrap();
    let trace = classify_step(&mut m, &d, &cfg, 0).unwrap();
    let (after, _) = evaluate_model(&m, &labeled, &alpha, &cfg.augment, None).unwrap();
    assert_eq!(trace.len(), 40);
    assert!(after.mof > before.mof, "{} -> {}", before.mof, after.mof);
    let reads = d.label_reads();
    assert_eq!(reads.unlabeled, 0);
    assert_eq!(reads.labeled, 40 * d.num_labeled());
}

#[test]
fn pseudo_labels_are_deterministic_and_consistent_with_evaluation() {
    let (train, _) = toy_data();
    let d = audited(&train, 0.3);
    let mut m = toy_model();
    classify_step(&mut m, &d, &toy_cfg(), 0).unwrap();
    let aug = toy_cfg().augment;
    let v = &train[0];
    let a = pseudo_label(&m, &v.features, &aug).unwrap();
    assert_eq!(a, pseudo_label(&m, &v.features, &aug).unwrap());
    assert_eq!(a.len(), v.len());
    assert!(a.iter().all(|&y| y < 6));

    let mut ev = Evaluator::default();
    ev.add(&a, &v.labels).unwrap();
    let (r, _) = evaluate_model(&m, std::slice::from_ref(v), &EnsembleWeights::uniform(3), &aug, None).unwrap();
    assert_eq!(ev.report().unwrap().mof, r.mof);
}

#[test]
fn contrast_step_uses_pseudo_labels_for_unlabeled_videos() {
    let (train, _) = toy_data();
    let d = audited(&train, 0.3);
    let mut m = toy_model();
    let heads = m.heads.params().clone();
    let pseudo: Vec<Vec<usize>> = (0..d.num_unlabeled()).map(|i| vec![0; d.unlabeled_features(i).dim(0)]).collect();
    let trace = contrast_step(&mut m, &d, &pseudo, &toy_cfg(), 0).unwrap();
    assert_eq!(trace.len(), 2);
    assert!(trace.iter().all(|l| l.is_finite()));
    assert!(m.heads.params().same_values(&heads));
    assert_eq!(d.label_reads().unlabeled, 0);
    assert!(d.label_reads().labeled > 0);
    assert!(contrast_step(&mut m, &d, &pseudo[1..], &toy_cfg(), 0).is_err());
}

#[test]
fn contrast_step_without_unlabeled_videos() {
    let (train, _) = toy_data();
    let d = audited(&train, 1.0);
    assert_eq!(d.num_unlabeled(), 0);
    let trace = contrast_step(&mut toy_model(), &d, &[], &toy_cfg(), 0).unwrap();
    assert_eq!(trace.len(), 2);
}

#[test]
fn run_icc_is_deterministic_and_audited() {
    let (train, test) = toy_data();
    let cfg = toy_cfg();
    let run = |cfg: &ICCConfig| {
        let d = audited(&train, cfg.labeled_fraction);
        let mut m = toy_model();
        let r = run_icc(&mut m, &d, &test, cfg).unwrap();
        (r, m)
    };
    let (a, ma) = run(&cfg);
    let (b, mb) = run(&cfg);
    assert_eq!(a, b);
    assert!(ma.params().same_values(mb.params()));
    assert_eq!(a.len(), 2);
    assert_eq!(a.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![1, 2]);
    assert!(a.iter().all(|r| r.label_reads.unlabeled == 0 && r.contrast_loss.is_some()));

    let skip = ICCConfig { skip_unsupervised: true, ..cfg };
    let (s, _) = run(&skip);
    assert!(s[0].contrast_loss.is_none() && s[1].contrast_loss.is_some());
    assert!(s.iter().all(|r| r.skip_unsupervised));
}

#[test]
fn full_labels_still_emit_every_report() {
    let (train, test) = toy_data();
    let cfg = ICCConfig { iterations: 4, labeled_fraction: 1.0, ..toy_cfg() };
    let d = audited(&train, 1.0);
    let r = run_icc(&mut toy_model(), &d, &test, &cfg).unwrap();
    assert_eq!(r.len(), 4);
    assert!(r.iter().all(|x| x.unlabeled_videos == 0));
}
