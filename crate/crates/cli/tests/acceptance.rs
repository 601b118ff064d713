//! The nine acceptance criteria, one pass/fail line each.
//!
//! Run with `cargo test -p singleens-cli --test acceptance -- --nocapture`;
//! the lines go straight to stderr and show up even without `--nocapture`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::time::Instant;

use serde_json::Value;
use singleens::corpus::{inflate, ClassificationExample, Sampling};
use singleens::encoder::{EncoderConfig, TaskKind};
use singleens::ensemble::{generate_orthogonal_bank, AugmentationPolicy, ScaleMode};
use singleens::evaluation::{
    aggregate_classification, aggregate_labeling, extract_spans, span_f1, PredictionSet, Span,
};
use singleens::gradcheck::standard_suite;
use singleens::model::Model;
use singleens::synthetic::KeywordTask;
use singleens::tensor::AdamConfig;
use singleens::training::{
    run_experiment, shrink_encoder, train_single, train_single_ens, ExperimentConfig, ExperimentMode, TaskData,
};
use singleens::Rng;
use singleens_cli::config::load_config;
use singleens_cli::{cmd_ablate, read_manifest, RunOptions, MANIFEST_FILE};

struct Outcome {
    pass: bool,
    detail: String,
}

fn line(n: usize, name: &str, o: &Outcome) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    writeln!(err, "[{status}] criterion {n}: {name}: {}", o.detail).unwrap();
}

fn ex(words: &str, label: usize) -> ClassificationExample {
    ClassificationExample {
        tokens: words.split_whitespace().map(str::to_string).collect(),
        label,
    }
}

fn eight_examples() -> TaskData {
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

fn fixture_config(mode: ExperimentMode, k: usize, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        k,
        encoder: EncoderConfig {
            embed_dim: 8,
            num_heads: 2,
            num_layers: 2,
            ff_dim: 16,
            max_seq_len: 16,
            ..Default::default()
        },
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

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut checked = 0;
    for seed in [1, 2, 3] {
        for (name, err) in standard_suite(seed).unwrap() {
            checked += 1;
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        pass: worst.1 <= 1e-4 && secs < 60.0,
        detail: format!(
            "{checked} checks, worst {} = {:.2e} (limit 1e-4), {secs:.1}s (limit 60s)",
            worst.0, worst.1
        ),
    }
}

fn orthogonality() -> Outcome {
    let mut rng = Rng::new(20);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let dim = 1 + rng.below(128);
        let k = 1 + rng.below(dim);
        let scale = 0.1 + 10.0 * rng.uniform();
        let seed = rng.next_u64();
        let bank = generate_orthogonal_bank::<f64>(k, dim, scale, seed).unwrap();
        let g = bank.gram();
        let s2 = scale * scale;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { s2 } else { 0.0 };
                worst = worst.max((g[i * k + j] - target).abs() / s2);
            }
        }
    }

    let data = eight_examples();
    let mut cfg = fixture_config(ExperimentMode::SingleEns, 4, 50);
    cfg.batch_size = Some(64);
    let fresh = Model::<f64>::new(
        cfg.encoder.clone(),
        TaskKind::Classification,
        data.vocab.with_tags(4),
        data.labels.clone(),
        Some((4, cfg.policy)),
        8,
    )
    .unwrap();
    let run = train_single_ens::<f64>(&cfg, &data, 8).unwrap();
    let unchanged = run.model.bank_bytes() == fresh.bank_bytes();
    let moved = run.model.store().checksum() != fresh.store().checksum();
    Outcome {
        pass: worst <= 1e-5 && unchanged && moved && run.record.iterations == 50,
        detail: format!(
            "50 banks, worst Gram deviation {worst:.2e}·s² (limit 1e-5·s²); bank bytes unchanged after {} steps: {unchanged}",
            run.record.iterations
        ),
    }
}

fn reduction() -> Outcome {
    let t = Instant::now();
    let data = eight_examples();
    let single = train_single::<f64>(&fixture_config(ExperimentMode::Single, 1, 10), &data, 11).unwrap();
    let mut cfg = fixture_config(ExperimentMode::SingleEns, 1, 10);
    cfg.sampling = Some(Sampling::FullCopy);
    cfg.policy.scale_mode = ScaleMode::Fixed(0.0);
    let ens = train_single_ens::<f64>(&cfg, &data, 11).unwrap();
    let bits = |r: &singleens::training::RunRecord| r.losses().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let same = bits(&single.record) == bits(&ens.record) && !single.record.losses().is_empty();
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        pass: same && secs < 30.0,
        detail: format!(
            "{} epoch losses bitwise equal: {same}, {secs:.1}s (limit 30s)",
            single.record.epochs.len()
        ),
    }
}

fn brute_average(members: &[Vec<f64>]) -> usize {
    let c = members[0].len();
    let sums: Vec<f64> = (0..c).map(|j| members.iter().map(|m| m[j]).sum()).collect();
    (0..c).fold(0, |b, j| if sums[j] > sums[b] { j } else { b })
}

fn brute_vote(members: &[Vec<f64>]) -> usize {
    let c = members[0].len();
    let top = |m: &Vec<f64>| (0..c).fold(0, |b, j| if m[j] > m[b] { j } else { b });
    let score = |l: usize| {
        let votes = members.iter().filter(|m| top(m) == l).count();
        let mass: f64 = members.iter().map(|m| m[l]).sum();
        (votes, mass)
    };
    let mut best = 0;
    for l in 1..c {
        let (a, b) = (score(l), score(best));
        if a.0 > b.0 || (a.0 == b.0 && a.1 > b.1) {
            best = l;
        }
    }
    best
}

fn aggregation() -> Outcome {
    let mut rng = Rng::new(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = 1 + rng.below(5);
        let c = 1 + rng.below(4);
        let t = 1 + rng.below(3);
        let dist = |rng: &mut Rng| {
            let raw: Vec<f64> = (0..c).map(|_| (1 + rng.below(5)) as f64).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let members: Vec<Vec<f64>> = (0..k).map(|_| dist(&mut rng)).collect();
        if aggregate_classification(&members).unwrap().0 != brute_average(&members) {
            mismatches += 1;
        }
        let seqs: Vec<Vec<Vec<f64>>> = (0..k).map(|_| (0..t).map(|_| dist(&mut rng)).collect()).collect();
        let voted = aggregate_labeling(&seqs).unwrap();
        for (pos, &v) in voted.iter().enumerate() {
            let at: Vec<Vec<f64>> = seqs.iter().map(|s| s[pos].clone()).collect();
            if v != brute_vote(&at) {
                mismatches += 1;
            }
        }
    }

    let set = |xs: &[(usize, usize, &str)]| xs.iter().map(|&(s, e, l)| Span::new(s, e, l)).collect::<BTreeSet<_>>();
    let close = |a: (f64, f64, f64), b: (f64, f64, f64)| {
        (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12 && (a.2 - b.2).abs() < 1e-12
    };
    let fixtures = [
        (
            span_f1(&set(&[(0, 2, "PER"), (3, 4, "ORG")]), &set(&[(0, 2, "PER")])),
            (0.5, 1.0, 2.0 / 3.0),
        ),
        (span_f1(&set(&[(0, 2, "PER")]), &set(&[(0, 2, "PER")])), (1.0, 1.0, 1.0)),
        (span_f1(&set(&[]), &set(&[(0, 2, "PER")])), (0.0, 0.0, 0.0)),
        (
            span_f1(
                &extract_spans(&["B-ORG", "B-ORG"]),
                &set(&[(0, 1, "ORG"), (1, 2, "ORG")]),
            ),
            (1.0, 1.0, 1.0),
        ),
        (
            span_f1(&extract_spans(&["B-PER", "I-PER", "O"]), &set(&[(0, 2, "PER")])),
            (1.0, 1.0, 1.0),
        ),
    ];
    let f1_ok = fixtures.iter().filter(|(got, want)| close(*got, *want)).count();
    Outcome {
        pass: mismatches == 0 && f1_ok == fixtures.len(),
        detail: format!(
            "1000 cases, {mismatches} disagreements with brute force; span-F1 fixtures {f1_ok}/{}",
            fixtures.len()
        ),
    }
}

fn bootstrap() -> Outcome {
    let n = 100;
    let expected = 1.0 - (1.0 - 1.0 / n as f64).powi(n as i32);
    let mut total = 0.0;
    let mut subsets = 0;
    for seed in 0..200 {
        let d = inflate(n, 3, Sampling::Bootstrap, seed).unwrap();
        for k in 1..=3 {
            let distinct: BTreeSet<usize> = d.subset(k).map(|e| e.source).collect();
            total += distinct.len() as f64 / n as f64;
            subsets += 1;
        }
    }
    let rate = total / subsets as f64;
    Outcome {
        pass: (rate - expected).abs() <= 0.05,
        detail: format!("mean inclusion {rate:.4} vs {expected:.4} over {subsets} subsets (tolerance 0.05)"),
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn trend_config(mode: ExperimentMode) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        k: 5,
        encoder: EncoderConfig {
            embed_dim: 16,
            num_heads: 2,
            num_layers: 1,
            ff_dim: 32,
            max_seq_len: 32,
            ..Default::default()
        },
        optimizer: AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        policy: AugmentationPolicy {
            scale_mode: ScaleMode::Fixed(1.0),
            ..Default::default()
        },
        batch_size: Some(32),
        max_epochs: 60,
        patience: 5,
        ..Default::default()
    }
}

/// Trend run plus the divergence check on its SingleEns models.
fn trend_and_divergence() -> (Outcome, Outcome) {
    let t = Instant::now();
    let task = KeywordTask::default();
    let mut rng = Rng::new(2024);
    let train = task.generate(2000, &mut rng);
    let valid = task.generate(500, &mut rng);
    let test = task.generate(500, &mut rng);
    let data = TaskData::classification(&train, &valid, &test, KeywordTask::labels(), 1).unwrap();

    let mut acc = Vec::new();
    let mut ens_models = Vec::new();
    for mode in [ExperimentMode::Single, ExperimentMode::SingleEns] {
        let mut xs = Vec::new();
        for seed in 1..=5 {
            let mut run = run_experiment::<f64>(&trend_config(mode), &data, seed).unwrap();
            xs.push(run.test_metric.unwrap());
            if mode == ExperimentMode::SingleEns {
                ens_models.push(run.runs.remove(0).model);
            }
        }
        acc.push(xs);
    }
    let secs = t.elapsed().as_secs_f64();
    let (sm, ss) = mean_std(&acc[0]);
    let (em, es) = mean_std(&acc[1]);
    let trend = Outcome {
        pass: em >= sm - 0.005 && es <= ss && secs < 600.0,
        detail: format!(
            "Single {:.2} ± {:.2}, SingleEns K=5 {:.2} ± {:.2} (points, 5 seeds); strictly better: {}; {secs:.0}s (limit 600s)",
            100.0 * sm,
            100.0 * ss,
            100.0 * em,
            100.0 * es,
            em > sm
        ),
    };

    let ids: Vec<Vec<usize>> = data.test[..50].iter().map(|e| e.ids.clone()).collect();
    let mut min_mean = f64::INFINITY;
    let mut identical_pairs = 0;
    for m in &ens_models {
        let mut sum = 0.0;
        let mut pairs = 0;
        for set in m.predict(&ids, 64).unwrap() {
            let PredictionSet::Classification { members } = set else {
                unreachable!()
            };
            for a in 0..members.len() {
                for b in a + 1..members.len() {
                    let tv = 0.5
                        * members[a]
                            .iter()
                            .zip(&members[b])
                            .map(|(p, q)| (p - q).abs())
                            .sum::<f64>();
                    if tv == 0.0 {
                        identical_pairs += 1;
                    }
                    sum += tv;
                    pairs += 1;
                }
            }
        }
        min_mean = min_mean.min(sum / pairs as f64);
    }
    let divergence = Outcome {
        pass: min_mean > 0.0,
        detail: format!(
            "mean pairwise TV over 50 sentences, lowest over 5 seeds {min_mean:.3e}; identical pairs {identical_pairs}"
        ),
    };
    (trend, divergence)
}

fn mask_numbers(v: &mut Value) {
    match v {
        Value::Number(_) => *v = Value::from(0),
        Value::Array(xs) => xs.iter_mut().for_each(mask_numbers),
        Value::Object(m) => m.values_mut().for_each(mask_numbers),
        _ => {}
    }
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let task = KeywordTask::default();
    let mut rng = Rng::new(3);
    for (name, n) in [("train.tsv", 60), ("test.tsv", 20)] {
        let xs = task.generate(n, &mut rng);
        let f = fs::File::create(dir.path().join(name)).unwrap();
        singleens::corpus::write_classification_tsv(f, &xs, &KeywordTask::labels()).unwrap();
    }
    let cfg_path = dir.path().join("ablate.toml");
    fs::write(
        &cfg_path,
        r#"name = "toy"
model = "Tfm"
mode = "single_ens"
k = 3
seeds = [1, 2]
max_epochs = 2
batch_size = 16

[encoder]
embed_dim = 8
num_heads = 2
num_layers = 1
ff_dim = 16
max_seq_len = 32

[data]
train = "train.tsv"
test = "test.tsv"
valid_fraction = 0.2
"#,
    )
    .unwrap();
    let opts = RunOptions {
        out_dir: dir.path().join("out"),
        workers: 1,
        seeds: None,
    };
    let report = cmd_ablate(&load_config(&cfg_path).unwrap(), &opts).unwrap();
    let t3: Vec<&str> = report.ablations.iter().map(|r| r.arm.as_str()).collect();
    let t4: Vec<&str> = report.placements.iter().map(|r| r.arm.as_str()).collect();
    let arms_ok =
        t3 == [
            "Single",
            "Only pseudo-tags",
            "Random distinct vectors",
            "Random noise",
            "SingleEns",
        ] && t4 == ["Emb", "Hidden", "Emb+Hidden"];

    let manifest = read_manifest(&opts.out_dir.join(MANIFEST_FILE)).unwrap();
    let arm_names: BTreeSet<&str> = manifest.entries.iter().filter_map(|e| e.arm.as_deref()).collect();
    let seeds_ok = arm_names.iter().all(|arm| {
        let s: Vec<u64> = manifest
            .entries
            .iter()
            .filter(|e| e.arm.as_deref() == Some(arm))
            .map(|e| e.seed)
            .collect();
        s == [1, 2]
    }) && arm_names.len() == 8
        && report
            .ablations
            .iter()
            .chain(&report.placements)
            .all(|r| r.values.len() == 2);

    let mut v: Value = serde_json::from_str(&fs::read_to_string(opts.out_dir.join("ablation.json")).unwrap()).unwrap();
    mask_numbers(&mut v);
    let golden: Value = serde_json::from_str(include_str!("fixtures/ablation_schema.json")).unwrap();
    let schema_ok = v == golden;
    Outcome {
        pass: arms_ok && seeds_ok && schema_ok,
        detail: format!(
            "ablation arms {t3:?}, placement arms {t4:?}; shared seeds: {seeds_ok}; schema golden: {schema_ok}"
        ),
    }
}

fn parameter_parity() -> Outcome {
    let toks: Vec<String> = (0..300).map(KeywordTask::word).collect();
    let vocab = singleens::corpus::Vocabulary::build([toks.as_slice()], 1, 0);
    let labels = KeywordTask::labels();
    let enc = EncoderConfig::default();
    let d = enc.embed_dim;
    let single = Model::<f64>::new(
        enc.clone(),
        TaskKind::Classification,
        vocab.clone(),
        labels.clone(),
        None,
        1,
    )
    .unwrap()
    .trainable_params();
    let mut notes = Vec::new();
    let mut pass = true;
    for k in [1, 3, 5, 9] {
        let ens = Model::<f64>::new(
            enc.clone(),
            TaskKind::Classification,
            vocab.with_tags(k),
            labels.clone(),
            Some((k, AugmentationPolicy::default())),
            1,
        )
        .unwrap()
        .trainable_params();
        pass &= ens == single + k * d;
        notes.push(format!("K={k}: +{}", ens - single));
    }
    for k in [2, 3, 5, 9] {
        let small = shrink_encoder(&enc, k, vocab.len(), labels.len()).unwrap();
        let member = Model::<f64>::new(small, TaskKind::Classification, vocab.clone(), labels.clone(), None, 1)
            .unwrap()
            .trainable_params();
        let ratio = member as f64 * k as f64 / single as f64;
        pass &= ratio <= 1.25;
        notes.push(format!("1/{k} member {:.2}×full/K", ratio));
    }
    Outcome {
        pass,
        detail: format!("Single {single} params, D={d}; {}", notes.join(", ")),
    }
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        line(n, name, &o);
        if !o.pass {
            failed.push(n);
        }
    };
    report(1, "gradient suite", gradients());
    report(2, "orthogonality suite", orthogonality());
    report(3, "reduction equivalence", reduction());
    report(4, "aggregation oracles", aggregation());
    report(5, "bootstrap statistics", bootstrap());
    let (trend, divergence) = trend_and_divergence();
    report(6, "desk-scale trend", trend);
    report(7, "virtual-model divergence", divergence);
    report(8, "ablation harness completeness", ablation_harness());
    report(9, "parameter parity", parameter_parity());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
