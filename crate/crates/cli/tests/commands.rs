use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use singleens::corpus::write_classification_tsv;
use singleens::model::Model;
use singleens::synthetic::KeywordTask;
use singleens::training::ExperimentMode;
use singleens::Rng;
use singleens_cli::config::load_config;
use singleens_cli::report::{build_report, render_markdown};
use singleens_cli::*;

fn fixture(dir: &Path, mode: &str, k: usize, extra: &str) -> PathBuf {
    let task = KeywordTask::default();
    let mut rng = Rng::new(3);
    for (name, n) in [("train.tsv", 60), ("test.tsv", 20)] {
        let xs = task.generate(n, &mut rng);
        write_classification_tsv(File::create(dir.join(name)).unwrap(), &xs, &KeywordTask::labels()).unwrap();
    }
    let cfg = dir.join("experiment.toml");
    fs::write(
        &cfg,
        format!(
            r#"name = "toy"
model = "Tfm"
mode = "{mode}"
k = {k}
seeds = [1, 2]
max_epochs = 2
batch_size = 16
{extra}
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
"#
        ),
    )
    .unwrap();
    cfg
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        out_dir: dir.join("out"),
        workers: 2,
        seeds: None,
    }
}

#[test]
fn train_single_writes_one_checkpoint_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_config(&fixture(dir.path(), "single", 1, "")).unwrap();
    let entries = cmd_train(&cfg, &opts(dir.path())).unwrap();
    assert_eq!(entries.len(), 2);
    for e in &entries {
        assert_eq!(e.checkpoints.len(), 1);
        assert!(e.complete && e.value.is_some());
        let m = Model::<f64>::load(&dir.path().join("out").join(&e.checkpoints[0])).unwrap();
        assert!(m.bank().is_none());
        let rec: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("out").join(&e.records[0])).unwrap()).unwrap();
        assert_eq!(rec["epochs"].as_array().unwrap().len(), 2);
        assert_eq!(rec["config"]["mode"], "single");
    }
    let manifest = read_manifest(&dir.path().join("out").join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.entries, entries);
}

#[test]
fn train_single_ens_embeds_the_bank() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_config(&fixture(dir.path(), "single_ens", 3, "")).unwrap();
    let entries = cmd_train(&cfg, &opts(dir.path())).unwrap();
    for e in &entries {
        assert_eq!(e.checkpoints.len(), 1);
        let m = Model::<f64>::load(&dir.path().join("out").join(&e.checkpoints[0])).unwrap();
        assert_eq!(m.bank().unwrap().k(), 3);
    }
    // rerunning a seed replaces its manifest entry
    let again = RunOptions {
        seeds: Some(vec![2]),
        ..opts(dir.path())
    };
    let second = cmd_train(&cfg, &again).unwrap();
    let manifest = read_manifest(&dir.path().join("out").join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.entries.len(), 2);
    assert_eq!(second[0].value, entries[1].value);

    let ev = cmd_evaluate(&cfg, &[dir.path().join("out").join(&entries[0].checkpoints[0])], None).unwrap();
    assert_eq!(ev.value, entries[0].value.unwrap());
    assert_eq!((ev.models, ev.virtual_models, ev.examples), (1, 3, 20));
}

#[test]
fn real_ensembles_write_member_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_config(&fixture(dir.path(), "one_kth_ens", 2, "")).unwrap();
    let o = RunOptions {
        seeds: Some(vec![4]),
        ..opts(dir.path())
    };
    let e = &cmd_train(&cfg, &o).unwrap()[0];
    assert_eq!(e.checkpoints.len(), 2);
    assert_eq!(e.method, "1/K Ens");
    let paths: Vec<PathBuf> = e.checkpoints.iter().map(|c| dir.path().join("out").join(c)).collect();
    let ev = cmd_evaluate(&cfg, &paths, None).unwrap();
    assert_eq!(ev.value, e.value.unwrap());
    assert_eq!(ev.models, 2);
}

#[test]
fn missing_data_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path(), "single", 1, "");
    fs::remove_file(dir.path().join("test.tsv")).unwrap();
    let err = cmd_train(&load_config(&path).unwrap(), &opts(dir.path())).unwrap_err();
    assert!(format!("{err:#}").contains("data.test"), "{err:#}");
    assert_eq!(error_kind(&err), "config");
    assert!(!dir.path().join("out").exists());
}

fn mask_numbers(v: &mut Value) {
    match v {
        Value::Number(_) => *v = Value::from(0),
        Value::Array(xs) => xs.iter_mut().for_each(mask_numbers),
        Value::Object(m) => m.values_mut().for_each(mask_numbers),
        _ => {}
    }
}

#[test]
fn ablation_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_config(&fixture(dir.path(), "single_ens", 3, "")).unwrap();
    let report = cmd_ablate(&cfg, &opts(dir.path())).unwrap();
    assert_eq!(report.baseline, report.ablations[0]);
    let mut v: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/ablation.json")).unwrap()).unwrap();
    mask_numbers(&mut v);
    let golden: Value = serde_json::from_str(include_str!("fixtures/ablation_schema.json")).unwrap();
    assert_eq!(v, golden);

    let manifest = read_manifest(&dir.path().join("out").join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.entries.len(), 8 * 2);
    let arms: Vec<&str> = manifest
        .entries
        .iter()
        .filter(|e| e.seed == 1)
        .map(|e| e.arm.as_deref().unwrap())
        .collect();
    assert_eq!(
        arms,
        [
            "Single",
            "Only pseudo-tags",
            "Random distinct vectors",
            "Random noise",
            "SingleEns",
            "Emb",
            "Hidden",
            "Emb+Hidden"
        ]
    );
    // SingleEns and Emb share a configuration and therefore a result
    let val = |arm: &str| {
        manifest
            .entries
            .iter()
            .find(|e| e.seed == 2 && e.arm.as_deref() == Some(arm))
            .unwrap()
            .value
    };
    assert_eq!(val("SingleEns"), val("Emb"));
    let md = fs::read_to_string(dir.path().join("out/ablation.md")).unwrap();
    assert_eq!(md.matches("| Single |").count(), 2);
}

#[test]
fn sweep_rows_and_skips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_config(&fixture(
        dir.path(),
        "single_ens",
        1,
        "sampling = \"full_copy\"\n[policy]\nscale_mode = 0.0\n[sweep]\nks = [1, 3]\nnormal_ens = true\n",
    ))
    .unwrap();
    let o = RunOptions {
        seeds: Some(vec![1]),
        ..opts(dir.path())
    };
    let sweep = cmd_sweep_k(&cfg, &[1, 3, 12], &o).unwrap();
    let keys: Vec<(&str, usize, bool)> = sweep
        .rows
        .iter()
        .map(|r| (r.method.as_str(), r.k, r.note.is_some()))
        .collect();
    assert_eq!(
        keys,
        [
            ("SingleEns", 1, false),
            ("SingleEns", 3, false),
            ("SingleEns", 12, true),
            ("NormalEns", 1, true),
            ("NormalEns", 3, false),
            ("NormalEns", 12, false)
        ]
    );
    let csv = fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().next().unwrap().starts_with("method,K,n,mean,std,note"));

    // the K=1, s=0 arm reproduces Single
    let single = load_config(&fixture(dir.path(), "single", 1, "")).unwrap();
    let s = cmd_train(
        &single,
        &RunOptions {
            out_dir: dir.path().join("single"),
            ..o
        },
    )
    .unwrap();
    assert_eq!(sweep.rows[0].mean, s[0].value);
}

#[test]
fn report_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/report_manifest.json");
    let report = cmd_report(&manifest, dir.path()).unwrap();
    let md = fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert_eq!(md, include_str!("fixtures/report.md"));
    assert_eq!(render_markdown(&report), md);
    assert!(report.partial);

    let json: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    assert!((rows[0]["std"].as_f64().unwrap() - 0.02).abs() < 1e-12);
    assert!(rows[0]["delta"].is_null());
    assert!((rows[1]["delta"].as_f64().unwrap() - 0.02).abs() < 1e-12);
    assert!((json["iteration_ratios"][0]["ratio"].as_f64().unwrap() - 16.0 / 11.0).abs() < 1e-12);
    assert_eq!(json["incomplete"][0], "toy/Tfm/NormalEns seed 1");
    assert_eq!(
        build_report(&read_manifest(&manifest).unwrap()).rows[2].method,
        ExperimentMode::OneKthEns.label()
    );
}

#[test]
fn binary_reports_errors_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "mode = \"single\"\nlearning_rate = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_singleens"))
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("learning_rate"));
}

#[test]
fn binary_trains_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), "single", 1, "");
    let out_dir = dir.path().join("out");
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_singleens"))
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "7",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    let md = run(&["report", "--out-dir", out_dir.to_str().unwrap()]);
    assert!(md.contains("| toy | Tfm | Single |  |"), "{md}");
    assert!(out_dir.join("report.json").is_file());
}
