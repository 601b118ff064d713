//! TOML experiment files.
//!
//! The file is an [`ExperimentConfig`] written flat (`mode`, `k`,
//! `[encoder]`, `[policy]`, `[data]`, ...) plus two front-end keys: `model`,
//! the model label used in reports, and an optional `[sweep]` section.
//! Relative data paths resolve against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use singleens::training::ExperimentConfig;
use singleens::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
    /// Also sweep a real ensemble of `K` members.
    pub normal_ens: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 3, 5, 9],
            normal_ens: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub model: String,
    pub sweep: SweepConfig,
    pub experiment: ExperimentConfig,
}

impl CliConfig {
    pub fn dataset(&self) -> &str {
        &self.experiment.name
    }
}

pub fn parse_config(text: &str, base_dir: &Path) -> Result<CliConfig, Error> {
    let bad = |e: toml::de::Error| Error::Config(e.message().trim().to_string());
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
    let model = match table.remove("model") {
        None => "Tfm".to_string(),
        Some(toml::Value::String(s)) => s,
        Some(v) => {
            return Err(Error::Config(format!(
                "model: expected a string, found {}",
                v.type_str()
            )))
        }
    };
    let sweep = match table.remove("sweep") {
        None => SweepConfig::default(),
        Some(v) => v
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("sweep: {}", e.message().trim())))?,
    };
    let mut experiment: ExperimentConfig = toml::Value::Table(table).try_into().map_err(bad)?;
    for p in [
        &mut experiment.data.train,
        &mut experiment.data.valid,
        &mut experiment.data.test,
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base_dir.join(&*p);
        }
    }
    let problems = experiment.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    Ok(CliConfig {
        model,
        sweep,
        experiment,
    })
}

pub fn load_config(path: &Path) -> Result<CliConfig, Error> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let dir = path.parent().map_or_else(PathBuf::new, Path::to_path_buf);
    parse_config(&text, &dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use singleens::encoder::TaskKind;
    use singleens::training::ExperimentMode;

    #[test]
    fn flat_file_with_sections() {
        let c = parse_config(
            r#"
name = "toy"
model = "Tfm:small"
task = "labeling"
mode = "normal_ens"
k = 3
seeds = [1, 2]

[encoder]
embed_dim = 32

[data]
train = "train.conll"

[sweep]
ks = [1, 2]
"#,
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(c.model, "Tfm:small");
        assert_eq!(c.dataset(), "toy");
        assert_eq!(c.experiment.task, TaskKind::TokenLabeling);
        assert_eq!(c.experiment.mode, ExperimentMode::NormalEns);
        assert_eq!(c.experiment.encoder.embed_dim, 32);
        assert_eq!(c.experiment.encoder.num_heads, 4);
        assert_eq!(c.experiment.data.train, Some(PathBuf::from("/data/train.conll")));
        assert_eq!(c.sweep.ks, [1, 2]);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_config("mdoe = \"single\"\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("mdoe"), "{err}");
        let err = parse_config("[encoder]\nembed_dims = 8\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("embed_dims"), "{err}");
        let err = parse_config("[sweep]\nk = [1]\n", Path::new(".")).unwrap_err();
        assert!(
            err.to_string().contains("sweep") && err.to_string().contains("`k`"),
            "{err}"
        );
    }

    #[test]
    fn readme_example_parses() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\n").unwrap() + 8;
        let end = start + readme[start..].find("```").unwrap();
        let c = parse_config(&readme[start..end], Path::new("/x")).unwrap();
        assert_eq!(c.dataset(), "imdb");
        assert_eq!(c.experiment.k, 9);
        assert_eq!(c.experiment.policy.placement, singleens::ensemble::Placement::Emb);
        assert_eq!(c.sweep.ks, [1, 3, 5, 9]);
        let c = parse_config(
            "[policy]\nplacement = \"emb_plus_hidden\"\nablation = \"tags_only\"\nscale_mode = \"match_embedding_norm\"\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(c.experiment.policy.ablation, singleens::ensemble::Ablation::TagsOnly);
    }

    #[test]
    fn invalid_values_are_named() {
        let err = parse_config("k = 0\nseeds = []\n", Path::new(".")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("k:") && msg.contains("seeds:"), "{msg}");
    }
}
