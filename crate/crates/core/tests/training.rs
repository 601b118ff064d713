use singleens::corpus::{ClassificationExample, Sampling, TaggedSentence};
use singleens::encoder::{EncoderConfig, TaskKind};
use singleens::ensemble::ScaleMode;
use singleens::evaluation::PredictionSet;
use singleens::synthetic::{entity_sentences, KeywordTask};
use singleens::tensor::AdamConfig;
use singleens::training::*;
use singleens::{Error, Rng};

fn ex(words: &str, label: usize) -> ClassificationExample {
    ClassificationExample {
        tokens: words.split_whitespace().map(str::to_string).collect(),
        label,
    }
}

fn fixture() -> TaskData {
    let train = vec![
        ex("good film", 1),
        ex("bad film", 0),
        ex("really good acting", 1),
        ex("really bad plot", 0),
        ex("good plot and good acting", 1),
        ex("bad bad bad", 0),
        ex("a good one", 1),
        ex("a bad one", 0),
    ];
    let valid = vec![ex("good one", 1), ex("bad acting", 0)];
    TaskData::classification(&train, &valid, &valid, KeywordTask::labels(), 1).unwrap()
}

fn small() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        num_heads: 2,
        num_layers: 2,
        ff_dim: 16,
        max_seq_len: 16,
        ..Default::default()
    }
}

fn base(mode: ExperimentMode, k: usize, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        k,
        encoder: small(),
        optimizer: AdamConfig {
            lr: 1e-2,
            ..Default::default()
        },
        batch_size: Some(4),
        max_epochs: epochs,
        patience: epochs,
        ..Default::default()
    }
}

#[test]
fn one_virtual_model_at_zero_scale_is_single() {
    let data = fixture();
    let single = train_single::<f64>(&base(ExperimentMode::Single, 1, 6), &data, 11).unwrap();
    let mut cfg = base(ExperimentMode::SingleEns, 1, 6);
    cfg.sampling = Some(Sampling::FullCopy);
    cfg.policy.scale_mode = ScaleMode::Fixed(0.0);
    let ens = train_single_ens::<f64>(&cfg, &data, 11).unwrap();
    let a: Vec<u64> = single.record.losses().iter().map(|x| x.to_bits()).collect();
    let b: Vec<u64> = ens.record.losses().iter().map(|x| x.to_bits()).collect();
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert_eq!(single.record.best_valid, ens.record.best_valid);
}

#[test]
fn same_seed_same_run() {
    let data = fixture();
    let cfg = base(ExperimentMode::SingleEns, 3, 3);
    let a = train_single_ens::<f64>(&cfg, &data, 5).unwrap();
    let b = train_single_ens::<f64>(&cfg, &data, 5).unwrap();
    assert_eq!(a.record.losses(), b.record.losses());
    assert_eq!(a.model.store().checksum(), b.model.store().checksum());
    let c = train_single_ens::<f64>(&cfg, &data, 6).unwrap();
    assert_ne!(a.model.store().checksum(), c.model.store().checksum());
}

#[test]
fn virtual_ensemble_learns() {
    let data = fixture();
    let mut cfg = base(ExperimentMode::SingleEns, 3, 30);
    cfg.sampling = Some(Sampling::FullCopy);
    let run = train_single_ens::<f64>(&cfg, &data, 2).unwrap();
    let l = run.record.losses();
    assert_eq!(l.len(), 30);
    assert!(l[29] < 0.7 * l[0], "{l:?}");
    assert_eq!(run.record.iterations, 30 * 6);
}

#[test]
fn bank_survives_training() {
    let data = fixture();
    let mut cfg = base(ExperimentMode::SingleEns, 4, 50);
    cfg.batch_size = Some(32);
    let before = singleens::model::Model::<f64>::new(
        cfg.encoder.clone(),
        TaskKind::Classification,
        data.vocab.with_tags(4),
        data.labels.clone(),
        Some((4, cfg.policy)),
        8,
    )
    .unwrap()
    .bank_bytes()
    .unwrap();
    let run = train_single_ens::<f64>(&cfg, &data, 8).unwrap();
    assert_eq!(run.record.iterations, 50);
    assert_eq!(run.model.bank_bytes().unwrap(), before);
}

#[test]
fn virtual_models_disagree_after_training() {
    let data = fixture();
    let cfg = base(ExperimentMode::SingleEns, 3, 10);
    let run = train_single_ens::<f64>(&cfg, &data, 3).unwrap();
    let xs: Vec<Vec<usize>> = data.train.iter().map(|e| e.ids.clone()).collect();
    for set in run.model.predict(&xs, 8).unwrap() {
        let PredictionSet::Classification { members } = set else {
            panic!("classification model");
        };
        assert_eq!(members.len(), 3);
        assert_ne!(members[0], members[1]);
        assert_ne!(members[1], members[2]);
    }
}

#[test]
fn real_ensemble_members_are_independent() {
    let data = fixture();
    let cfg = base(ExperimentMode::NormalEns, 3, 2);
    let runs = train_normal_ens::<f64>(&cfg, &data, 1).unwrap();
    let sums: Vec<u64> = runs.iter().map(|r| r.model.store().checksum()).collect();
    assert!(sums[0] != sums[1] && sums[1] != sums[2] && sums[0] != sums[2]);
    let again = train_normal_ens::<f64>(&cfg, &data, 1).unwrap();
    assert_eq!(again[2].model.store().checksum(), sums[2]);
    assert_eq!(
        runs.iter().map(|r| r.record.member).collect::<Vec<_>>(),
        [Some(0), Some(1), Some(2)]
    );
}

#[test]
fn parameter_budgets() {
    let data = fixture();
    let mut cfg = base(ExperimentMode::Single, 4, 1);
    cfg.encoder = EncoderConfig {
        embed_dim: 32,
        num_heads: 4,
        ff_dim: 64,
        ..cfg.encoder
    };
    let single = run_experiment::<f64>(&cfg, &data, 1).unwrap();
    cfg.mode = ExperimentMode::SingleEns;
    let ens = run_experiment::<f64>(&cfg, &data, 1).unwrap();
    assert_eq!(ens.n_params(), single.n_params() + 4 * 32);
    cfg.mode = ExperimentMode::OneKthEns;
    let kth = run_experiment::<f64>(&cfg, &data, 1).unwrap();
    assert_eq!(kth.runs.len(), 4);
    for r in &kth.runs {
        assert!(r.record.n_params as f64 <= single.n_params() as f64 / 4.0 * 1.25);
    }
    let m = kth.test_metric.unwrap();
    assert!((0.0..=1.0).contains(&m));
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let data = fixture();
    let mut cfg = base(ExperimentMode::Single, 1, 40);
    cfg.patience = 2;
    let run = train_single::<f64>(&cfg, &data, 4).unwrap();
    let r = &run.record;
    let best = r.best_epoch.unwrap();
    let peak = r
        .epochs
        .iter()
        .map(|e| e.valid_metric)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_valid, Some(peak));
    assert_eq!(r.epochs[best - 1].valid_metric, peak);
    assert!(r.epochs[..best - 1].iter().all(|e| e.valid_metric < peak));
    if r.epochs.len() < 40 {
        assert_eq!(r.epochs.len(), best + 2);
    }
    let restored = evaluate(&[&run.model], &data.labels, &data.valid, 16).unwrap();
    assert_eq!(restored, peak);
}

#[test]
fn divergence_is_recorded() {
    let data = fixture();
    let mut cfg = base(ExperimentMode::Single, 1, 20);
    cfg.optimizer.lr = 1e200;
    cfg.clip_norm = Some(1e300);
    let run = run_experiment::<f64>(&cfg, &data, 1).unwrap();
    assert!(run.diverged());
    assert!(run.test_metric.is_none());
    match &run.runs[0].record.status {
        RunStatus::Diverged { message, .. } => assert!(message.contains("non-finite")),
        s => panic!("{s:?}"),
    }
}

#[test]
fn labeling_end_to_end() {
    let mut rng = Rng::new(9);
    let train = entity_sentences(120, &mut rng);
    let valid = entity_sentences(30, &mut rng);
    let data = TaskData::labeling(&train, &valid, &valid, 1).unwrap();
    let mut cfg = base(ExperimentMode::SingleEns, 2, 15);
    cfg.task = TaskKind::TokenLabeling;
    cfg.batch_size = Some(16);
    let run = run_experiment::<f64>(&cfg, &data, 1).unwrap();
    assert_eq!(run.metric, "span_f1");
    assert!(run.test_metric.unwrap() > 0.8, "{:?}", run.test_metric);
}

#[test]
fn unseen_label_is_rejected() {
    let s = |l: &str| TaggedSentence {
        tokens: vec!["x".into()],
        labels: vec![l.into()],
    };
    let err = TaskData::labeling(&[s("O")], &[s("B-PER")], &[], 1).unwrap_err();
    assert!(matches!(err, Error::Label(_)), "{err}");
}

#[test]
fn empty_training_set_is_a_config_error() {
    let mut data = fixture();
    data.train.clear();
    let err = train_single::<f64>(&base(ExperimentMode::Single, 1, 1), &data, 1).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let err = train_single_ens::<f64>(&base(ExperimentMode::SingleEns, 2, 1), &data, 1).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn scale_search_reports_every_candidate() {
    let data = fixture();
    let mut cfg = base(ExperimentMode::SingleEns, 2, 1);
    cfg.scale_search = true;
    let run = run_experiment::<f64>(&cfg, &data, 1).unwrap();
    assert_eq!(run.scale_trials.len(), ScaleMode::search_space().len());
    let best = run
        .scale_trials
        .iter()
        .map(|t| t.valid_metric)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(run.runs[0].record.best_valid, Some(best));
}
