//! Command-line front end: training runs, ablation grids, K sweeps and reports.

pub mod config;
pub mod data;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use singleens::corpus::Sampling;
use singleens::model::Model;
use singleens::training::{
    ablation_arms, evaluate, run_experiment, ExperimentConfig, ExperimentMode, ExperimentRun, Manifest, ManifestEntry,
    TaskData,
};

use crate::config::CliConfig;
use crate::report::{build_report, AblationReport, ArmRow, Report, SweepReport, SweepRow};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Flags shared by the commands that train.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub workers: usize,
    /// Replaces the seed list of the config.
    pub seeds: Option<Vec<u64>>,
}

struct Job {
    cfg: ExperimentConfig,
    arm: Option<String>,
    seed: u64,
}

fn seeds(cli: &CliConfig, opts: &RunOptions) -> Vec<u64> {
    opts.seeds.clone().unwrap_or_else(|| cli.experiment.seeds.clone())
}

fn run_jobs(jobs: &[Job], data: &TaskData, workers: usize) -> Result<Vec<ExperimentRun<f64>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .context("cannot start worker pool")?;
    pool.install(|| {
        jobs.par_iter()
            .map(|j| {
                log::info!(
                    "training {}{} seed {}",
                    j.cfg.mode.label(),
                    j.arm.as_deref().map(|a| format!(" [{a}]")).unwrap_or_default(),
                    j.seed
                );
                run_experiment::<f64>(&j.cfg, data, j.seed).map_err(anyhow::Error::from)
            })
            .collect()
    })
}

fn slug(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

/// Writes the records and checkpoints of one run below `out_dir` and
/// returns its manifest entry; paths in the entry are relative to `out_dir`.
fn write_run(out_dir: &Path, cli: &CliConfig, job: &Job, run: &mut ExperimentRun<f64>) -> Result<ManifestEntry> {
    let mut dir = PathBuf::from("runs").join(slug(cli.dataset()));
    let mut leaf = slug(job.cfg.mode.label());
    if let Some(a) = &job.arm {
        leaf = format!("{leaf}-{}", slug(a));
    }
    dir.push(leaf);
    dir.push(format!("seed-{}", job.seed));
    fs::create_dir_all(out_dir.join(&dir)).with_context(|| format!("cannot create {}", dir.display()))?;

    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    for tr in &mut run.runs {
        let suffix = tr.record.member.map(|m| format!("-member-{m}")).unwrap_or_default();
        let ck = dir.join(format!("checkpoint{suffix}.json"));
        tr.model.save(&out_dir.join(&ck))?;
        tr.record.checkpoint = Some(ck.clone());
        let rec = dir.join(format!("record{suffix}.json"));
        write_json(&out_dir.join(&rec), &tr.record)?;
        records.push(rec);
        checkpoints.push(ck);
    }
    Ok(ManifestEntry {
        dataset: cli.dataset().to_string(),
        model: cli.model.clone(),
        method: job.cfg.mode.label().to_string(),
        arm: job.arm.clone(),
        task: job.cfg.task,
        k: job.cfg.effective_k(),
        seed: job.seed,
        metric: run.metric.to_string(),
        value: run.test_metric,
        n_params: run.n_params(),
        iterations: run.iterations(),
        records,
        checkpoints,
        complete: run.test_metric.is_some(),
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
}

/// Adds `entries` to the manifest in `out_dir`, replacing earlier runs of the
/// same dataset, model, method, arm and seed.
fn update_manifest(out_dir: &Path, entries: &[ManifestEntry]) -> Result<Manifest> {
    let path = out_dir.join(MANIFEST_FILE);
    let mut manifest = if path.exists() {
        read_manifest(&path)?
    } else {
        Manifest::default()
    };
    let same = |a: &ManifestEntry, b: &ManifestEntry| {
        (&a.dataset, &a.model, &a.method, &a.arm, a.seed) == (&b.dataset, &b.model, &b.method, &b.arm, b.seed)
    };
    manifest.entries.retain(|old| !entries.iter().any(|e| same(old, e)));
    manifest.entries.extend(entries.iter().cloned());
    write_json(&path, &manifest)?;
    Ok(manifest)
}

fn train_jobs(cli: &CliConfig, data: &TaskData, jobs: Vec<Job>, opts: &RunOptions) -> Result<Vec<ManifestEntry>> {
    let mut runs = run_jobs(&jobs, data, opts.workers)?;
    let mut entries = Vec::with_capacity(jobs.len());
    for (job, run) in jobs.iter().zip(&mut runs) {
        entries.push(write_run(&opts.out_dir, cli, job, run)?);
    }
    update_manifest(&opts.out_dir, &entries)?;
    Ok(entries)
}

/// Runs the configured mode for every seed; returns the new manifest entries.
pub fn cmd_train(cli: &CliConfig, opts: &RunOptions) -> Result<Vec<ManifestEntry>> {
    let data = data::load_data(&cli.experiment)?;
    let cfg = &cli.experiment;
    let arm = (cfg.mode != ExperimentMode::SingleEns && cfg.sampling() == Sampling::Bootstrap)
        .then(|| "bootstrap".to_string());
    let jobs = seeds(cli, opts)
        .into_iter()
        .map(|seed| Job {
            cfg: cfg.clone(),
            arm: arm.clone(),
            seed,
        })
        .collect();
    train_jobs(cli, &data, jobs, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub metric: String,
    pub value: f64,
    pub models: usize,
    pub virtual_models: usize,
    pub examples: usize,
}

/// Aggregated metric of the given checkpoints (one model, or the members of
/// a real ensemble) on `data`, or on the configured test file.
pub fn cmd_evaluate(cli: &CliConfig, checkpoints: &[PathBuf], data: Option<&Path>) -> Result<Evaluation> {
    if checkpoints.is_empty() {
        bail!(singleens::Error::Config("at least one checkpoint is required".into()));
    }
    let models: Vec<Model<f64>> = checkpoints
        .iter()
        .map(|p| Model::load(p).with_context(|| format!("cannot load checkpoint {}", p.display())))
        .collect::<Result<_>>()?;
    let path = match data.map(Path::to_path_buf).or_else(|| cli.experiment.data.test.clone()) {
        Some(p) => p,
        None => bail!(singleens::Error::Config("data.test: nothing to evaluate on".into())),
    };
    let xs = data::load_for_model(&cli.experiment, &models[0], &path)?;
    let refs: Vec<&Model<f64>> = models.iter().collect();
    let value = evaluate(&refs, models[0].labels(), &xs, cli.experiment.eval_batch_size)?;
    Ok(Evaluation {
        metric: match models[0].task() {
            singleens::encoder::TaskKind::Classification => "accuracy",
            singleens::encoder::TaskKind::TokenLabeling => "span_f1",
        }
        .to_string(),
        value,
        models: models.len(),
        virtual_models: models.iter().map(Model::num_virtual).sum(),
        examples: xs.len(),
    })
}

/// Trains every ablation and placement arm on shared seeds. Arms with equal
/// configurations are trained once.
pub fn cmd_ablate(cli: &CliConfig, opts: &RunOptions) -> Result<AblationReport> {
    let data = data::load_data(&cli.experiment)?;
    let mut base = cli.experiment.clone();
    if base.mode != ExperimentMode::SingleEns {
        log::warn!("ablations run on a single_ens base; ignoring mode {:?}", base.mode);
        base.mode = ExperimentMode::SingleEns;
    }
    base.validate()?;
    let (ablations, placements) = ablation_arms(&base);
    let seeds = seeds(cli, opts);

    let mut unique: Vec<ExperimentConfig> = Vec::new();
    let mut arm_of = Vec::new();
    for (name, cfg) in ablations.iter().chain(&placements) {
        let idx = match unique.iter().position(|c| c == cfg) {
            Some(i) => i,
            None => {
                unique.push(cfg.clone());
                unique.len() - 1
            }
        };
        arm_of.push((*name, idx));
    }
    let jobs: Vec<Job> = unique
        .iter()
        .flat_map(|cfg| {
            let name = arm_of.iter().find(|(_, i)| unique[*i] == *cfg).map(|(n, _)| *n);
            seeds.iter().map(move |&seed| Job {
                cfg: cfg.clone(),
                arm: name.map(str::to_string),
                seed,
            })
        })
        .collect();
    let mut runs = run_jobs(&jobs, &data, opts.workers)?;

    let mut entries = Vec::new();
    for (job, run) in jobs.iter().zip(&mut runs) {
        entries.push(write_run(&opts.out_dir, cli, job, run)?);
    }
    // every arm sharing a configuration gets its own manifest entry
    let n = seeds.len();
    let mut all_entries = Vec::new();
    for (name, idx) in &arm_of {
        for e in &entries[idx * n..(idx + 1) * n] {
            all_entries.push(ManifestEntry {
                arm: Some(name.to_string()),
                ..e.clone()
            });
        }
    }
    update_manifest(&opts.out_dir, &all_entries)?;

    let row_values = |idx: usize| -> (usize, Vec<Option<f64>>) {
        let slice = &entries[idx * n..(idx + 1) * n];
        (slice[0].n_params, slice.iter().map(|e| e.value).collect())
    };
    let single_idx = arm_of[0].1;
    let (sp, sv) = row_values(single_idx);
    let baseline = ArmRow::new(ExperimentMode::Single.label(), sp, sv, None);
    let rows = |range: std::ops::Range<usize>| -> Vec<ArmRow> {
        arm_of[range]
            .iter()
            .map(|(name, idx)| {
                let (p, v) = row_values(*idx);
                ArmRow::new(name, p, v, baseline.mean)
            })
            .collect()
    };
    let report = AblationReport {
        dataset: cli.dataset().to_string(),
        model: cli.model.clone(),
        metric: entries[0].metric.clone(),
        seeds: seeds.clone(),
        ablations: rows(0..ablations.len()),
        placements: rows(ablations.len()..arm_of.len()),
        baseline,
    };
    write_json(&opts.out_dir.join("ablation.json"), &report)?;
    fs::write(opts.out_dir.join("ablation.md"), report::render_ablation(&report))?;
    Ok(report)
}

/// SingleEns (and NormalEns when enabled) for every `K`; infeasible arms
/// become note rows. Writes `sweep.csv` and `sweep.json`.
pub fn cmd_sweep_k(cli: &CliConfig, ks: &[usize], opts: &RunOptions) -> Result<SweepReport> {
    let data = data::load_data(&cli.experiment)?;
    let seeds = seeds(cli, opts);
    let d = cli.experiment.encoder.embed_dim;
    let mut methods = vec![ExperimentMode::SingleEns];
    if cli.sweep.normal_ens {
        methods.push(ExperimentMode::NormalEns);
    }

    let mut slots: Vec<(ExperimentMode, usize, Option<String>)> = Vec::new();
    let mut jobs = Vec::new();
    for &mode in &methods {
        for &k in ks {
            let note = match mode {
                ExperimentMode::SingleEns if k > d => Some(format!("skipped: K={k} exceeds embed_dim {d}")),
                ExperimentMode::NormalEns if k < 2 => Some("skipped: a real ensemble needs K >= 2".to_string()),
                _ if k == 0 => Some("skipped: K must be positive".to_string()),
                _ => None,
            };
            if let Some(n) = &note {
                log::warn!("{}: {n}", mode.label());
            } else {
                let mut cfg = cli.experiment.clone();
                cfg.mode = mode;
                cfg.k = k;
                for &seed in &seeds {
                    jobs.push(Job {
                        cfg: cfg.clone(),
                        arm: Some(format!("K={k}")),
                        seed,
                    });
                }
            }
            slots.push((mode, k, note));
        }
    }
    let entries = train_jobs(cli, &data, jobs, opts)?;
    let mut it = entries.chunks(seeds.len());
    let mut metric = String::new();
    let rows = slots
        .into_iter()
        .map(|(mode, k, note)| {
            let (n, mean, std) = match note {
                Some(_) => (0, None, None),
                None => {
                    let chunk = it.next().expect("one chunk per trained slot");
                    metric = chunk[0].metric.clone();
                    let vals: Vec<f64> = chunk.iter().filter_map(|e| e.value).collect();
                    let (m, s) = report::mean_std(&vals);
                    (vals.len(), m, s)
                }
            };
            SweepRow {
                method: mode.label().to_string(),
                k,
                n,
                mean,
                std,
                note,
            }
        })
        .collect();
    let sweep = SweepReport::new(&metric, rows);
    for (m, ok) in &sweep.monotone {
        log::info!("{m}: mean non-decreasing in K: {ok}");
    }
    fs::create_dir_all(&opts.out_dir)?;
    fs::write(opts.out_dir.join("sweep.csv"), sweep.to_csv()?)?;
    write_json(&opts.out_dir.join("sweep.json"), &sweep)?;
    Ok(sweep)
}

/// Aggregates a manifest into `report.md` and `report.json` in `out_dir`.
pub fn cmd_report(manifest: &Path, out_dir: &Path) -> Result<Report> {
    let report = build_report(&read_manifest(manifest)?);
    if report.partial {
        log::warn!("{} incomplete run(s) left out of the report", report.incomplete.len());
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.md"), report::render_markdown(&report))?;
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Machine-readable kind of an error, for the JSON printed on failure.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    use singleens::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(e) => match e {
            E::Config(_) => "config",
            E::Parse { .. } => "parse",
            E::Label(_) => "label",
            E::Checkpoint(_) => "checkpoint",
            E::Io(_) => "io",
            E::Json(_) => "json",
            E::NumericDomain(_) => "numeric",
            E::InfeasibleOrthogonality { .. } => "infeasible_orthogonality",
            _ => "internal",
        },
        None if err.chain().any(|e| e.downcast_ref::<std::io::Error>().is_some()) => "io",
        None => "error",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("1/K Ens"), "1-k-ens");
        assert_eq!(slug("Emb+Hidden"), "emb-hidden");
        assert_eq!(slug("Only pseudo-tags"), "only-pseudo-tags");
        assert_eq!(slug("K=5"), "k-5");
    }

    #[test]
    fn error_kinds() {
        let e = anyhow::Error::from(singleens::Error::Config("x".into())).context("loading");
        assert_eq!(error_kind(&e), "config");
        assert_eq!(error_kind(&anyhow::anyhow!("plain")), "error");
    }
}
