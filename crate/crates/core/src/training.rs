//! Seeded training loops for Single, SingleEns, NormalEns and 1/K Ens.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    inflate, ClassificationExample, InflatedDataset, LabelIndex, Sampling, TaggedExample, TaggedSentence, Vocabulary,
    LAST_COLUMN,
};
use crate::encoder::{EncoderConfig, Mode, TaskKind};
use crate::ensemble::{Ablation, AugmentationPolicy, ScaleMode};
use crate::error::{Error, Result};
use crate::evaluation::{
    accuracy, aggregate_classification, aggregate_labeling, extract_spans, PredictionSet, SpanCounts,
};
use crate::model::Model;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{adam_step, clip_global_norm, AdamConfig, AdamState, ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    Single,
    SingleEns,
    NormalEns,
    OneKthEns,
}

impl ExperimentMode {
    /// Method label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::Single => "Single",
            Self::SingleEns => "SingleEns",
            Self::NormalEns => "NormalEns",
            Self::OneKthEns => "1/K Ens",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub lowercase: bool,
    pub min_freq: usize,
    pub token_col: usize,
    pub label_col: usize,
    /// Share of the training file held out when no validation file is given.
    pub valid_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            valid: None,
            test: None,
            lowercase: false,
            min_freq: 1,
            token_col: 0,
            label_col: LAST_COLUMN,
            valid_fraction: 0.1,
        }
    }
}

/// One experiment. Unset optional fields take the per-task defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskKind,
    pub mode: ExperimentMode,
    pub k: usize,
    pub policy: AugmentationPolicy,
    /// Train one model per scale candidate and keep the best on validation.
    pub scale_search: bool,
    /// Inflation for SingleEns; resampling for the baselines (`full_copy` = none).
    pub sampling: Option<Sampling>,
    pub encoder: EncoderConfig,
    /// Member encoder for 1/K Ens; derived from `encoder` when absent.
    pub one_kth_encoder: Option<EncoderConfig>,
    pub optimizer: AdamConfig,
    pub label_smoothing: Option<f64>,
    pub clip_norm: Option<f64>,
    pub batch_size: Option<usize>,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            task: TaskKind::Classification,
            mode: ExperimentMode::SingleEns,
            k: 9,
            policy: AugmentationPolicy::default(),
            scale_search: false,
            sampling: None,
            encoder: EncoderConfig::default(),
            one_kth_encoder: None,
            optimizer: AdamConfig::default(),
            label_smoothing: None,
            clip_norm: None,
            batch_size: None,
            eval_batch_size: 256,
            max_epochs: 100,
            patience: 5,
            seeds: vec![1],
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn label_smoothing(&self) -> f64 {
        self.label_smoothing.unwrap_or(match self.task {
            TaskKind::Classification => 0.1,
            TaskKind::TokenLabeling => 0.0,
        })
    }

    pub fn clip_norm(&self) -> f64 {
        self.clip_norm.unwrap_or(match self.task {
            TaskKind::Classification => 1.0,
            TaskKind::TokenLabeling => 5.0,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.task {
            TaskKind::Classification => 64,
            TaskKind::TokenLabeling => 32,
        })
    }

    pub fn sampling(&self) -> Sampling {
        self.sampling.unwrap_or(match (self.task, self.mode) {
            (TaskKind::Classification, ExperimentMode::SingleEns) => Sampling::Bootstrap,
            _ => Sampling::FullCopy,
        })
    }

    /// Virtual models in SingleEns, members in the two real ensembles, 1 for Single.
    pub fn effective_k(&self) -> usize {
        match self.mode {
            ExperimentMode::Single => 1,
            _ => self.k,
        }
    }

    /// Every violated constraint, named by its key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.k == 0 {
            out.push("k: must be at least 1".to_string());
        }
        if matches!(self.mode, ExperimentMode::NormalEns | ExperimentMode::OneKthEns) && self.k < 2 {
            out.push("k: real ensembles need at least 2 members".to_string());
        }
        if self.mode == ExperimentMode::SingleEns && self.k > self.encoder.embed_dim {
            out.push(format!(
                "k: {} exceeds encoder.embed_dim {}",
                self.k, self.encoder.embed_dim
            ));
        }
        if let Err(e) = self.encoder.validate() {
            out.push(format!("encoder: {e}"));
        }
        if let Some(enc) = &self.one_kth_encoder {
            if let Err(e) = enc.validate() {
                out.push(format!("one_kth_encoder: {e}"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing()) {
            out.push("label_smoothing: must lie in [0, 1)".to_string());
        }
        if !(self.clip_norm() > 0.0) {
            out.push("clip_norm: must be positive".to_string());
        }
        if self.batch_size() == 0 {
            out.push("batch_size: must be positive".to_string());
        }
        if self.eval_batch_size == 0 {
            out.push("eval_batch_size: must be positive".to_string());
        }
        if self.max_epochs == 0 {
            out.push("max_epochs: must be positive".to_string());
        }
        if !(self.optimizer.lr > 0.0) {
            out.push("optimizer.lr: must be positive".to_string());
        }
        if self.seeds.is_empty() {
            out.push("seeds: at least one seed is required".to_string());
        }
        if !(0.0..1.0).contains(&self.data.valid_fraction) {
            out.push("data.valid_fraction: must lie in [0, 1)".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            adam: self.optimizer,
            label_smoothing: self.label_smoothing(),
            clip_norm: self.clip_norm(),
            batch_size: self.batch_size(),
            eval_batch_size: self.eval_batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

/// Encoded input with one target per head row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Encoded train/valid/test splits sharing a tagless vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: TaskKind,
    pub vocab: Vocabulary,
    pub labels: LabelIndex,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskData {
    pub fn classification(
        train: &[ClassificationExample],
        valid: &[ClassificationExample],
        test: &[ClassificationExample],
        labels: LabelIndex,
        min_freq: usize,
    ) -> Result<Self> {
        let vocab = Vocabulary::build(train.iter().map(|e| e.tokens.as_slice()), min_freq, 0);
        let enc = |xs: &[ClassificationExample]| -> Result<Vec<Example>> {
            xs.iter()
                .map(|e| {
                    if e.label >= labels.len() {
                        return Err(Error::Label(format!("label id {} outside the label index", e.label)));
                    }
                    Ok(Example {
                        ids: vocab.encode(&e.tokens),
                        targets: vec![e.label],
                    })
                })
                .collect()
        };
        Ok(Self {
            task: TaskKind::Classification,
            train: enc(train)?,
            valid: enc(valid)?,
            test: enc(test)?,
            vocab,
            labels,
        })
    }

    /// Label inventory comes from the training sentences; an unseen label
    /// in validation or test data is a label error.
    pub fn labeling(
        train: &[TaggedSentence],
        valid: &[TaggedSentence],
        test: &[TaggedSentence],
        min_freq: usize,
    ) -> Result<Self> {
        let vocab = Vocabulary::build(train.iter().map(|s| s.tokens.as_slice()), min_freq, 0);
        let mut labels = LabelIndex::new();
        for s in train {
            for l in &s.labels {
                labels.intern(l)?;
            }
        }
        labels.freeze();
        let enc = |xs: &[TaggedSentence], labels: &mut LabelIndex| -> Result<Vec<Example>> {
            xs.iter()
                .map(|s| {
                    Ok(Example {
                        ids: vocab.encode(&s.tokens),
                        targets: s.labels.iter().map(|l| labels.intern(l)).collect::<Result<_>>()?,
                    })
                })
                .collect()
        };
        Ok(Self {
            task: TaskKind::TokenLabeling,
            train: enc(train, &mut labels)?,
            valid: enc(valid, &mut labels)?,
            test: enc(test, &mut labels)?,
            vocab,
            labels,
        })
    }
}

/// Splits off a seeded random share of `items` as a validation set.
pub fn hold_out<X: Clone>(items: &[X], fraction: f64, seed: u64) -> (Vec<X>, Vec<X>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    Rng::stream(seed, "holdout").shuffle(&mut idx);
    let n_valid = ((items.len() as f64) * fraction).round() as usize;
    let n_valid = n_valid.min(items.len().saturating_sub(1));
    let (v, t) = idx.split_at(n_valid);
    let mut v = v.to_vec();
    let mut t = t.to_vec();
    v.sort_unstable();
    t.sort_unstable();
    (
        t.iter().map(|&i| items[i].clone()).collect(),
        v.iter().map(|&i| items[i].clone()).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, step: u64, message: String },
}

/// Everything recorded about one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub mode: ExperimentMode,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    /// Member index within a real ensemble.
    pub member: Option<usize>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_valid: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    pub iterations: u64,
    pub n_params: usize,
    /// Resolved bank scale of a SingleEns model.
    pub scale: Option<f64>,
    #[serde(flatten)]
    pub status: RunStatus,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRun<T> {
    pub record: RunRecord,
    pub model: Model<T>,
}

fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classification => "accuracy",
        TaskKind::TokenLabeling => "span_f1",
    }
}

/// Aggregates each prediction set and scores it against the targets.
pub fn score<T: Scalar>(
    task: TaskKind,
    labels: &LabelIndex,
    sets: &[PredictionSet<T>],
    gold: &[Example],
) -> Result<f64> {
    if sets.len() != gold.len() {
        return Err(Error::Alignment(gold.len(), sets.len()));
    }
    match task {
        TaskKind::Classification => {
            let mut preds = Vec::with_capacity(sets.len());
            for s in sets {
                match s {
                    PredictionSet::Classification { members } => preds.push(aggregate_classification(members)?.0),
                    PredictionSet::Labeling { .. } => {
                        return Err(Error::Metric("labeling output for a classifier".into()))
                    }
                }
            }
            let golds: Vec<usize> = gold.iter().map(|e| e.targets[0]).collect();
            accuracy(&preds, &golds)
        }
        TaskKind::TokenLabeling => {
            let mut counts = SpanCounts::default();
            for (s, g) in sets.iter().zip(gold) {
                let PredictionSet::Labeling { members } = s else {
                    return Err(Error::Metric("classification output for a labeler".into()));
                };
                let pred = aggregate_labeling(members)?;
                if pred.len() != g.targets.len() {
                    return Err(Error::Alignment(g.targets.len(), pred.len()));
                }
                let names = |ids: &[usize]| ids.iter().map(|&i| labels.name(i).to_string()).collect::<Vec<_>>();
                counts.add(&extract_spans(&names(&pred)), &extract_spans(&names(&g.targets)));
            }
            Ok(counts.prf().2)
        }
    }
}

/// Predictions of several models merged member-wise, one set per example.
pub fn ensemble_predictions<T: Scalar>(
    models: &[&Model<T>],
    xs: &[Example],
    batch: usize,
) -> Result<Vec<PredictionSet<T>>> {
    let ids: Vec<Vec<usize>> = xs.iter().map(|e| e.ids.clone()).collect();
    let mut merged: Option<Vec<PredictionSet<T>>> = None;
    for m in models {
        let sets = m.predict(&ids, batch)?;
        merged = Some(match merged {
            None => sets,
            Some(acc) => acc
                .into_iter()
                .zip(sets)
                .map(|(a, b)| match (a, b) {
                    (
                        PredictionSet::Classification { mut members },
                        PredictionSet::Classification { members: more },
                    ) => {
                        members.extend(more);
                        Ok(PredictionSet::Classification { members })
                    }
                    (PredictionSet::Labeling { mut members }, PredictionSet::Labeling { members: more }) => {
                        members.extend(more);
                        Ok(PredictionSet::Labeling { members })
                    }
                    _ => Err(Error::Aggregation("ensemble members solve different tasks".into())),
                })
                .collect::<Result<_>>()?,
        });
    }
    merged.ok_or_else(|| Error::Aggregation("no models to ensemble".into()))
}

/// Aggregated metric of `models` on `xs`.
pub fn evaluate<T: Scalar>(models: &[&Model<T>], labels: &LabelIndex, xs: &[Example], batch: usize) -> Result<f64> {
    let first = models
        .first()
        .ok_or_else(|| Error::Aggregation("no models to evaluate".into()))?;
    let sets = ensemble_predictions(models, xs, batch)?;
    score(first.task(), labels, &sets, xs)
}

/// Batches of `order` grouped by length: pools of 32 batches are sorted by
/// length, cut into batches, and the batches shuffled.
fn length_batches(order: Vec<TaggedExample>, lens: &[usize], batch: usize, rng: &mut Rng) -> Vec<Vec<TaggedExample>> {
    let mut out = Vec::new();
    for pool in order.chunks(batch * 32) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|e| lens[e.source]);
        out.extend(pool.chunks(batch).map(|c| c.to_vec()));
    }
    rng.shuffle(&mut out);
    out
}

/// Result of [`fit`]: history, best epoch and divergence state.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_valid: Option<f64>,
    pub iterations: u64,
    pub status: RunStatus,
}

/// Trains `model` in place on `train` (inflated `K` times for a virtual
/// ensemble), early-stopping on the aggregated validation metric. The
/// weights of the best epoch are restored before returning.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &[Example],
    valid: &[Example],
    opts: &TrainOptions,
    sampling: Sampling,
    seed: u64,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let data = match model.virtual_spec() {
        Some(spec) => inflate(train.len(), spec.k, sampling, seed)?,
        None => match sampling {
            Sampling::FullCopy => InflatedDataset::plain(train.len()),
            Sampling::Bootstrap => {
                let mut d = inflate(train.len(), 1, Sampling::Bootstrap, seed)?;
                d.examples.iter_mut().for_each(|e| e.k = 0);
                d
            }
        },
    };
    let lens: Vec<usize> = train.iter().map(|e| e.ids.len()).collect();
    let labels = model.labels().clone();
    let mut shuffle_rng = Rng::stream(seed, "shuffle");
    let mut dropout_rng = Rng::stream(seed, "dropout");
    let mut augment_rng = Rng::stream(seed, "augment");
    let mut adam = AdamState::new();
    let smoothing = T::lit(opts.label_smoothing);
    let clip = T::lit(opts.clip_norm);

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<T>)> = None;
    let mut since_best = 0;
    let mut iterations = 0u64;
    let mut status = RunStatus::Completed;

    'epochs: for epoch in 1..=opts.max_epochs {
        let batches = length_batches(
            data.epoch_order(&mut shuffle_rng),
            &lens,
            opts.batch_size,
            &mut shuffle_rng,
        );
        let mut loss_sum = 0.0;
        for b in &batches {
            let mut inputs = Vec::with_capacity(b.len());
            let mut targets = Vec::new();
            for te in b {
                let ex = &train[te.source];
                inputs.push(model.training_input(&ex.ids, te.k, &mut augment_rng)?);
                targets.extend_from_slice(&ex.targets);
            }
            let batch = model.batch(&inputs)?;
            let mut tape = Tape::new();
            let vars = model.store().register(&mut tape);
            let step = (|| {
                let z = model.forward(&mut tape, &vars, &batch, &mut Mode::Train(&mut dropout_rng))?;
                let loss = tape.cross_entropy_smoothed(z, &targets, smoothing)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NumericDomain("training loss"));
                }
                tape.backward(loss)?;
                Ok(value)
            })();
            let value = match step {
                Ok(v) => v,
                Err(Error::NumericDomain(what)) => {
                    status = RunStatus::Diverged {
                        epoch,
                        step: iterations,
                        message: format!("non-finite value in {what}"),
                    };
                    log::warn!("run diverged at epoch {epoch}, step {iterations}");
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let mut grads = model.store_mut().collect_grads(&tape, &vars);
            clip_global_norm(&mut grads, clip);
            adam_step(model.store_mut(), &grads, &opts.adam, &mut adam)?;
            iterations += 1;
            loss_sum += value.to_f64_lossy();
        }
        let train_loss = loss_sum / batches.len() as f64;
        let valid_metric = evaluate(&[&*model], &labels, valid, opts.eval_batch_size)?;
        log::info!("epoch {epoch}: train loss {train_loss:.6}, valid {valid_metric:.4}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_metric,
        });
        if best.as_ref().is_none_or(|(_, m, _)| valid_metric > *m) {
            best = Some((epoch, valid_metric, model.store().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                break;
            }
        }
    }
    let (best_epoch, best_valid) = match best {
        Some((e, m, store)) => {
            *model.store_mut() = store;
            (Some(e), Some(m))
        }
        None => (None, None),
    };
    Ok(FitOutcome {
        epochs,
        best_epoch,
        best_valid,
        iterations,
        status,
    })
}

fn record<T: Scalar>(
    cfg: &ExperimentConfig,
    model: &Model<T>,
    out: FitOutcome,
    seed: u64,
    member: Option<usize>,
    started: Instant,
) -> RunRecord {
    RunRecord {
        config: cfg.clone(),
        mode: cfg.mode,
        k: cfg.effective_k(),
        seed,
        member,
        epochs: out.epochs,
        best_epoch: out.best_epoch,
        best_valid: out.best_valid,
        checkpoint: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        iterations: out.iterations,
        n_params: model.trainable_params(),
        scale: model.virtual_spec().map(|s| s.scale),
        status: out.status,
    }
}

fn check_task(cfg: &ExperimentConfig, data: &TaskData) -> Result<()> {
    cfg.validate()?;
    if cfg.task != data.task {
        return Err(Error::Config("config task does not match the data".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    Ok(())
}

/// Baseline: tagless model, generic tag at position 0.
pub fn train_single<T: Scalar>(cfg: &ExperimentConfig, data: &TaskData, seed: u64) -> Result<TrainedRun<T>> {
    check_task(cfg, data)?;
    let started = Instant::now();
    let mut model = Model::new(
        cfg.encoder.clone(),
        cfg.task,
        data.vocab.clone(),
        data.labels.clone(),
        None,
        seed,
    )?;
    let sampling = if cfg.mode == ExperimentMode::Single {
        cfg.sampling()
    } else {
        Sampling::FullCopy
    };
    let out = fit(
        &mut model,
        &data.train,
        &data.valid,
        &cfg.train_options(),
        sampling,
        seed,
    )?;
    Ok(TrainedRun {
        record: record(cfg, &model, out, seed, None, started),
        model,
    })
}

/// One model hosting `K` virtual models, trained on the `K`-fold inflated data.
pub fn train_single_ens<T: Scalar>(cfg: &ExperimentConfig, data: &TaskData, seed: u64) -> Result<TrainedRun<T>> {
    check_task(cfg, data)?;
    let started = Instant::now();
    let mut model = Model::new(
        cfg.encoder.clone(),
        cfg.task,
        data.vocab.with_tags(cfg.k),
        data.labels.clone(),
        Some((cfg.k, cfg.policy)),
        seed,
    )?;
    let out = fit(
        &mut model,
        &data.train,
        &data.valid,
        &cfg.train_options(),
        cfg.sampling(),
        seed,
    )?;
    Ok(TrainedRun {
        record: record(cfg, &model, out, seed, None, started),
        model,
    })
}

/// Seed of member `m` of a real ensemble run under `seed`.
pub fn member_seed(seed: u64, m: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    h = h.wrapping_add((m as u64 + 1).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    h ^= h >> 31;
    h.wrapping_mul(0x94d0_49bb_1331_11eb)
}

fn train_members<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &TaskData,
    seed: u64,
    encoder: EncoderConfig,
) -> Result<Vec<TrainedRun<T>>> {
    check_task(cfg, data)?;
    (0..cfg.k)
        .map(|m| {
            let started = Instant::now();
            let s = member_seed(seed, m);
            let mut model = Model::new(
                encoder.clone(),
                cfg.task,
                data.vocab.clone(),
                data.labels.clone(),
                None,
                s,
            )?;
            let out = fit(
                &mut model,
                &data.train,
                &data.valid,
                &cfg.train_options(),
                cfg.sampling(),
                s,
            )?;
            Ok(TrainedRun {
                record: record(cfg, &model, out, seed, Some(m), started),
                model,
            })
        })
        .collect()
}

/// `K` independently seeded full-size models.
pub fn train_normal_ens<T: Scalar>(cfg: &ExperimentConfig, data: &TaskData, seed: u64) -> Result<Vec<TrainedRun<T>>> {
    train_members(cfg, data, seed, cfg.encoder.clone())
}

/// `K` independently seeded models, each with about `1/K` of the parameters.
pub fn train_one_kth_ens<T: Scalar>(cfg: &ExperimentConfig, data: &TaskData, seed: u64) -> Result<Vec<TrainedRun<T>>> {
    let enc = match &cfg.one_kth_encoder {
        Some(e) => e.clone(),
        None => shrink_encoder(&cfg.encoder, cfg.k, data.vocab.len(), data.labels.len())?,
    };
    train_members(cfg, data, seed, enc)
}

/// Member encoder for 1/K Ens: the configuration with the most parameters
/// not exceeding `full / k`, searched over layer count, head count (divisors
/// of the original) and width, with the feed-forward size scaled along.
pub fn shrink_encoder(full: &EncoderConfig, k: usize, vocab_size: usize, num_classes: usize) -> Result<EncoderConfig> {
    let budget = full.parameter_count(vocab_size, num_classes) / k.max(1);
    let mut best: Option<(usize, EncoderConfig)> = None;
    for layers in 1..=full.num_layers {
        for heads in (1..=full.num_heads).filter(|h| full.num_heads.is_multiple_of(*h)) {
            for d in (heads..=full.embed_dim).step_by(heads) {
                let ff = ((full.ff_dim * d) as f64 / full.embed_dim as f64).round().max(1.0) as usize;
                let cand = EncoderConfig {
                    embed_dim: d,
                    num_heads: heads,
                    num_layers: layers,
                    ff_dim: ff,
                    ..full.clone()
                };
                let n = cand.parameter_count(vocab_size, num_classes);
                if n <= budget && best.as_ref().is_none_or(|(b, _)| n > *b) {
                    best = Some((n, cand));
                }
            }
        }
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| Error::Config(format!("no encoder fits within {budget} parameters")))
}

/// Output of one experiment run under one seed.
#[derive(Debug, Clone)]
pub struct ExperimentRun<T> {
    pub seed: u64,
    pub runs: Vec<TrainedRun<T>>,
    /// Test metric of the (aggregated) experiment, if a test set exists.
    pub test_metric: Option<f64>,
    pub metric: &'static str,
    /// Validation metric of every scale tried by the scale search.
    pub scale_trials: Vec<ScaleTrial>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleTrial {
    pub scale_mode: ScaleMode,
    pub scale: f64,
    pub valid_metric: f64,
}

impl<T: Scalar> ExperimentRun<T> {
    pub fn models(&self) -> Vec<&Model<T>> {
        self.runs.iter().map(|r| &r.model).collect()
    }

    /// Trainable parameters over all members.
    pub fn n_params(&self) -> usize {
        self.runs.iter().map(|r| r.record.n_params).sum()
    }

    pub fn iterations(&self) -> u64 {
        self.runs.iter().map(|r| r.record.iterations).sum()
    }

    pub fn diverged(&self) -> bool {
        self.runs.iter().any(|r| r.record.status != RunStatus::Completed)
    }
}

/// SingleEns trained once per scale candidate; the best validation metric wins.
pub fn scale_search<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &TaskData,
    seed: u64,
) -> Result<(TrainedRun<T>, Vec<ScaleTrial>)> {
    let mut best: Option<TrainedRun<T>> = None;
    let mut trials = Vec::new();
    for mode in ScaleMode::search_space() {
        let mut c = cfg.clone();
        c.policy.scale_mode = mode;
        let run = train_single_ens::<T>(&c, data, seed)?;
        let v = run.record.best_valid.unwrap_or(f64::NEG_INFINITY);
        trials.push(ScaleTrial {
            scale_mode: mode,
            scale: run.record.scale.unwrap_or(0.0),
            valid_metric: v,
        });
        if best
            .as_ref()
            .is_none_or(|b| v > b.record.best_valid.unwrap_or(f64::NEG_INFINITY))
        {
            best = Some(run);
        }
    }
    Ok((best.expect("search space is nonempty"), trials))
}

/// Dispatches on `cfg.mode` and scores the result on the test split.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig, data: &TaskData, seed: u64) -> Result<ExperimentRun<T>> {
    let mut scale_trials = Vec::new();
    let runs = match cfg.mode {
        ExperimentMode::Single => vec![train_single(cfg, data, seed)?],
        ExperimentMode::SingleEns if cfg.scale_search => {
            let (run, trials) = scale_search(cfg, data, seed)?;
            scale_trials = trials;
            vec![run]
        }
        ExperimentMode::SingleEns => vec![train_single_ens(cfg, data, seed)?],
        ExperimentMode::NormalEns => train_normal_ens(cfg, data, seed)?,
        ExperimentMode::OneKthEns => train_one_kth_ens(cfg, data, seed)?,
    };
    let diverged = runs.iter().any(|r| r.record.status != RunStatus::Completed);
    let test_metric = if data.test.is_empty() || diverged {
        None
    } else {
        let models: Vec<&Model<T>> = runs.iter().map(|r| &r.model).collect();
        Some(evaluate(&models, &data.labels, &data.test, cfg.eval_batch_size)?)
    };
    Ok(ExperimentRun {
        seed,
        runs,
        test_metric,
        metric: metric_name(cfg.task),
        scale_trials,
    })
}

/// Configuration of each arm of the ablation grids, keyed by its report name.
/// The first list holds the ablation arms, the second the placement arms.
pub fn ablation_arms(
    base: &ExperimentConfig,
) -> (
    Vec<(&'static str, ExperimentConfig)>,
    Vec<(&'static str, ExperimentConfig)>,
) {
    let with = |mode: ExperimentMode, f: &dyn Fn(&mut AugmentationPolicy)| {
        let mut c = base.clone();
        c.mode = mode;
        f(&mut c.policy);
        c
    };
    let ens = ExperimentMode::SingleEns;
    let ablations = vec![
        ("Single", with(ExperimentMode::Single, &|_| {})),
        ("Only pseudo-tags", with(ens, &|p| p.ablation = Ablation::TagsOnly)),
        (
            "Random distinct vectors",
            with(ens, &|p| p.ablation = Ablation::ShuffledCorrespondence),
        ),
        ("Random noise", with(ens, &|p| p.ablation = Ablation::RandomNoise)),
        ("SingleEns", with(ens, &|p| p.ablation = Ablation::Full)),
    ];
    let placements = [
        crate::ensemble::Placement::Emb,
        crate::ensemble::Placement::Hidden,
        crate::ensemble::Placement::EmbPlusHidden,
    ]
    .into_iter()
    .map(|pl| {
        (
            pl.name(),
            with(ens, &|p| {
                p.ablation = Ablation::Full;
                p.placement = pl;
            }),
        )
    })
    .collect();
    (ablations, placements)
}

/// Artifacts of a multi-run experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dataset: String,
    pub model: String,
    pub method: String,
    /// Arm name for ablation and sweep runs.
    pub arm: Option<String>,
    pub task: TaskKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub metric: String,
    pub value: Option<f64>,
    pub n_params: usize,
    pub iterations: u64,
    pub records: Vec<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub complete: bool,
}
