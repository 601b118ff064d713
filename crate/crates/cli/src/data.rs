//! Loading the configured data files into [`TaskData`].

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use singleens::corpus::{parse_classification_tsv, parse_conll, ClassificationExample, LabelIndex, TextOptions};
use singleens::encoder::TaskKind;
use singleens::model::Model;
use singleens::training::{hold_out, Example, ExperimentConfig, TaskData};
use singleens::{Error, Result};

/// Seed of the validation split carved from the training file; fixed so that
/// every mode, arm and seed sees the same split.
pub const HOLDOUT_SEED: u64 = 0x5eed;

fn open(key: &str, path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Config(format!("{key}: cannot open {}: {e}", path.display())))
}

/// Every configured path must exist before any training starts.
pub fn check_paths(cfg: &ExperimentConfig) -> Result<()> {
    let d = &cfg.data;
    if d.train.is_none() {
        return Err(Error::Config("data.train: a training file is required".into()));
    }
    let mut missing = Vec::new();
    for (key, p) in [
        ("data.train", &d.train),
        ("data.valid", &d.valid),
        ("data.test", &d.test),
    ] {
        if let Some(p) = p {
            if !p.is_file() {
                missing.push(format!("{key}: no such file {}", p.display()));
            }
        }
    }
    if d.valid.is_none() && d.valid_fraction <= 0.0 {
        missing.push("data.valid_fraction: must be positive when data.valid is absent".into());
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(missing.join("; ")))
    }
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<TaskData> {
    check_paths(cfg)?;
    let d = &cfg.data;
    let opts = TextOptions { lowercase: d.lowercase };
    let train_path = d.train.as_deref().expect("checked above");
    match cfg.task {
        TaskKind::Classification => {
            let mut labels = LabelIndex::new();
            let train = parse_classification_tsv(open("data.train", train_path)?, &mut labels, opts)?;
            labels.freeze();
            let mut read = |key, p: &Option<std::path::PathBuf>| -> Result<Option<Vec<ClassificationExample>>> {
                p.as_deref()
                    .map(|p| parse_classification_tsv(open(key, p)?, &mut labels, opts))
                    .transpose()
            };
            let valid = read("data.valid", &d.valid)?;
            let test = read("data.test", &d.test)?.unwrap_or_default();
            let (train, valid) = match valid {
                Some(v) => (train, v),
                None => hold_out(&train, d.valid_fraction, HOLDOUT_SEED),
            };
            TaskData::classification(&train, &valid, &test, labels, d.min_freq)
        }
        TaskKind::TokenLabeling => {
            let read = |key, p: &Path| -> Result<_> {
                let parsed = parse_conll(open(key, p)?, d.token_col, d.label_col, opts)?;
                if parsed.repairs > 0 {
                    log::warn!("{}: repaired {} invalid IOB transitions", p.display(), parsed.repairs);
                }
                Ok(parsed.sentences)
            };
            let train = read("data.train", train_path)?;
            let valid = d.valid.as_deref().map(|p| read("data.valid", p)).transpose()?;
            let test = d
                .test
                .as_deref()
                .map(|p| read("data.test", p))
                .transpose()?
                .unwrap_or_default();
            let (train, valid) = match valid {
                Some(v) => (train, v),
                None => hold_out(&train, d.valid_fraction, HOLDOUT_SEED),
            };
            TaskData::labeling(&train, &valid, &test, d.min_freq)
        }
    }
}

/// Reads `path` with the vocabulary and labels of a trained model.
pub fn load_for_model(cfg: &ExperimentConfig, model: &Model<f64>, path: &Path) -> Result<Vec<Example>> {
    let d = &cfg.data;
    let opts = TextOptions { lowercase: d.lowercase };
    let mut labels = model.labels().clone();
    labels.freeze();
    let vocab = model.vocab();
    match model.task() {
        TaskKind::Classification => Ok(parse_classification_tsv(open("data", path)?, &mut labels, opts)?
            .into_iter()
            .map(|e| Example {
                ids: vocab.encode(&e.tokens),
                targets: vec![e.label],
            })
            .collect()),
        TaskKind::TokenLabeling => parse_conll(open("data", path)?, d.token_col, d.label_col, opts)?
            .sentences
            .into_iter()
            .map(|s| {
                Ok(Example {
                    ids: vocab.encode(&s.tokens),
                    targets: s.labels.iter().map(|l| labels.intern(l)).collect::<Result<_>>()?,
                })
            })
            .collect(),
    }
}
