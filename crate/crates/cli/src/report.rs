//! Seed-aggregated tables: the main results table, the ablation grids and the K sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use singleens::training::{ExperimentMode, Manifest, ManifestEntry};

/// Mean and sample standard deviation; the deviation needs two values.
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

fn points(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{:.2}", 100.0 * v))
}

fn signed_points(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{:+.2}", 100.0 * v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    pub method: String,
    /// Sampling variant or ablation arm, when the run has one.
    pub variant: Option<String>,
    pub metric: String,
    pub n_params: usize,
    pub seeds: Vec<u64>,
    pub mean: f64,
    pub std: Option<f64>,
    /// `mean − Single mean` for the same dataset, model and metric; blank on Single rows.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRatio {
    pub dataset: String,
    pub model: String,
    pub single: f64,
    pub single_ens: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub iteration_ratios: Vec<IterationRatio>,
    pub partial: bool,
    /// `dataset/model/method[/variant] seed s` of every run left out.
    pub incomplete: Vec<String>,
}

fn describe(e: &ManifestEntry) -> String {
    let mut s = format!("{}/{}/{}", e.dataset, e.model, e.method);
    if let Some(a) = &e.arm {
        s.push('/');
        s.push_str(a);
    }
    write!(s, " seed {}", e.seed).unwrap();
    s
}

pub fn build_report(manifest: &Manifest) -> Report {
    type Key = (String, String, String, Option<String>, String);
    let mut groups: Vec<(Key, Vec<&ManifestEntry>)> = Vec::new();
    let mut incomplete = Vec::new();
    for e in &manifest.entries {
        if !e.complete || e.value.is_none() {
            incomplete.push(describe(e));
            continue;
        }
        let key = (
            e.dataset.clone(),
            e.model.clone(),
            e.method.clone(),
            e.arm.clone(),
            e.metric.clone(),
        );
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(e),
            None => groups.push((key, vec![e])),
        }
    }

    let single = ExperimentMode::Single.label();
    let mut rows: Vec<ReportRow> = groups
        .iter()
        .map(|((dataset, model, method, variant, metric), g)| {
            let values: Vec<f64> = g.iter().filter_map(|e| e.value).collect();
            let (mean, std) = mean_std(&values);
            ReportRow {
                dataset: dataset.clone(),
                model: model.clone(),
                method: method.clone(),
                variant: variant.clone(),
                metric: metric.clone(),
                n_params: g[0].n_params,
                seeds: g.iter().map(|e| e.seed).collect(),
                mean: mean.expect("groups are nonempty"),
                std,
                delta: None,
            }
        })
        .collect();
    let reference: Vec<Option<f64>> = rows
        .iter()
        .map(|r| {
            let same = |s: &&ReportRow| {
                s.method == single && s.dataset == r.dataset && s.model == r.model && s.metric == r.metric
            };
            rows.iter()
                .filter(same)
                .find(|s| s.variant == r.variant)
                .or_else(|| rows.iter().find(same))
                .map(|s| s.mean)
        })
        .collect();
    for (r, base) in rows.iter_mut().zip(reference) {
        if r.method != single {
            r.delta = base.map(|b| r.mean - b);
        }
    }

    let mut iteration_ratios = Vec::new();
    let mut pairs: Vec<(&str, &str)> = Vec::new();
    for e in &manifest.entries {
        if !pairs.contains(&(&e.dataset, &e.model)) {
            pairs.push((&e.dataset, &e.model));
        }
    }
    for (dataset, model) in pairs {
        let mean_iters = |method: &str| {
            let xs: Vec<f64> = manifest
                .entries
                .iter()
                .filter(|e| {
                    e.complete && e.dataset == dataset && e.model == model && e.method == method && e.arm.is_none()
                })
                .map(|e| e.iterations as f64)
                .collect();
            mean_std(&xs).0
        };
        if let (Some(s), Some(e)) = (mean_iters(single), mean_iters(ExperimentMode::SingleEns.label())) {
            iteration_ratios.push(IterationRatio {
                dataset: dataset.to_string(),
                model: model.to_string(),
                single: s,
                single_ens: e,
                ratio: e / s,
            });
        }
    }

    Report {
        rows,
        iteration_ratios,
        partial: !incomplete.is_empty(),
        incomplete,
    }
}

/// Markdown tables, one per metric; values in points (× 100).
pub fn render_markdown(report: &Report) -> String {
    let mut out = String::from("# Results\n");
    let mut metrics: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    for metric in metrics {
        writeln!(out, "\n## {metric}\n").unwrap();
        out.push_str("| Dataset | Model | Method | Variant | # params | Seeds | Mean | Std | Δ vs Single |\n");
        out.push_str("|---|---|---|---|---:|---:|---:|---:|---:|\n");
        for r in report.rows.iter().filter(|r| r.metric == metric) {
            writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                r.dataset,
                r.model,
                r.method,
                r.variant.as_deref().unwrap_or(""),
                r.n_params,
                r.seeds.len(),
                points(Some(r.mean)),
                points(r.std),
                signed_points(r.delta),
            )
            .unwrap();
        }
    }
    if !report.iteration_ratios.is_empty() {
        out.push_str("\n## Iterations\n\n| Dataset | Model | Single | SingleEns | Ratio |\n|---|---|---:|---:|---:|\n");
        for r in &report.iteration_ratios {
            writeln!(
                out,
                "| {} | {} | {:.1} | {:.1} | {:.2} |",
                r.dataset, r.model, r.single, r.single_ens, r.ratio
            )
            .unwrap();
        }
    }
    if report.partial {
        writeln!(
            out,
            "\n**Partial report:** {} incomplete run(s) left out.\n",
            report.incomplete.len()
        )
        .unwrap();
        for i in &report.incomplete {
            writeln!(out, "- {i}").unwrap();
        }
    }
    out
}

/// One arm of an ablation grid over the shared seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: String,
    pub n_params: usize,
    pub values: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub delta: Option<f64>,
}

impl ArmRow {
    pub fn new(arm: &str, n_params: usize, values: Vec<Option<f64>>, single_mean: Option<f64>) -> Self {
        let done: Vec<f64> = values.iter().flatten().copied().collect();
        let (mean, std) = if done.len() == values.len() {
            mean_std(&done)
        } else {
            (None, None)
        };
        Self {
            arm: arm.to_string(),
            n_params,
            delta: if arm == ExperimentMode::Single.label() {
                None
            } else {
                mean.zip(single_mean).map(|(m, s)| m - s)
            },
            values,
            mean,
            std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: String,
    pub model: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub baseline: ArmRow,
    /// Single, Only pseudo-tags, Random distinct vectors, Random noise, SingleEns.
    pub ablations: Vec<ArmRow>,
    /// Emb, Hidden, Emb+Hidden.
    pub placements: Vec<ArmRow>,
}

fn arm_table(out: &mut String, title: &str, rows: &[&ArmRow]) {
    writeln!(out, "\n## {title}\n").unwrap();
    out.push_str("| Arm | # params | Mean | Std | Δ vs Single |\n|---|---:|---:|---:|---:|\n");
    for r in rows {
        writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            r.arm,
            r.n_params,
            points(r.mean),
            points(r.std),
            signed_points(r.delta)
        )
        .unwrap();
    }
}

pub fn render_ablation(report: &AblationReport) -> String {
    let mut out = format!(
        "# Ablations: {} / {} ({}, seeds {:?})\n",
        report.dataset, report.model, report.metric, report.seeds
    );
    arm_table(
        &mut out,
        "Distinct vectors",
        &report.ablations.iter().collect::<Vec<_>>(),
    );
    let mut placement: Vec<&ArmRow> = vec![&report.baseline];
    placement.extend(&report.placements);
    arm_table(&mut out, "Placement", &placement);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metric: String,
    pub rows: Vec<SweepRow>,
    /// Per method: does the mean never decrease as `K` grows? Reported only.
    pub monotone: Vec<(String, bool)>,
}

impl SweepReport {
    pub fn new(metric: &str, rows: Vec<SweepRow>) -> Self {
        let mut methods: Vec<String> = Vec::new();
        for r in &rows {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
        }
        let monotone = methods
            .into_iter()
            .map(|m| {
                let means: Vec<f64> = rows.iter().filter(|r| r.method == m).filter_map(|r| r.mean).collect();
                let ok = means.windows(2).all(|w| w[1] >= w[0]);
                (m, ok)
            })
            .collect();
        Self {
            metric: metric.to_string(),
            rows,
            monotone,
        }
    }

    pub fn to_csv(&self) -> csv::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
    }
}
