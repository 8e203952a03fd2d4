//! Run configuration: one TOML file, individual keys overridable with `--set`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use gcprune::oracle::dataset::TaskSpec;
use gcprune::{PruneConfig, ToyArch};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    #[serde(default)]
    pub exclusions: Vec<String>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub run: RunLimits,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("gcprune-out")
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// A dataset file as written by `gcprune toy --dataset`.
    File { path: PathBuf },
    /// Synthetic data labelled by the model itself.
    Toy {
        arch: ToyArch,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_samples() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleConfig {
    Builtin {
        /// Samples drawn (seeded by `prune.seed`) for loss evaluation; all if unset.
        #[serde(default)]
        probe_size: Option<usize>,
    },
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_tag")]
        dataset_tag: String,
        /// Task list sent in the handshake; taken from the dataset if unset.
        #[serde(default)]
        tasks: Option<Vec<TaskSpec>>,
    },
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig::Builtin { probe_size: None }
    }
}

fn default_timeout() -> u64 {
    gcprune::oracle::external::DEFAULT_TIMEOUT.as_secs()
}

fn default_tag() -> String {
    "probe".into()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub ratios: Vec<f64>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self { ratios: vec![0.1, 0.3, 0.5] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunLimits {
    pub max_iterations: Option<usize>,
    /// Retraining command run after each iteration as `cmd.. <in> <out>`.
    pub fine_tune: Option<Vec<String>>,
}

/// Parses `text`, applies `key.path=value` overrides, and resolves relative
/// paths against `base`.
pub fn parse(text: &str, overrides: &[String], base: &Path) -> anyhow::Result<RunConfig> {
    let mut doc: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(doc).try_into().map_err(|e| anyhow!("{e}"))?;
    cfg.prune.validate()?;
    cfg.model = base.join(&cfg.model);
    cfg.output_dir = base.join(&cfg.output_dir);
    if let DatasetConfig::File { path } = &mut cfg.dataset {
        *path = base.join(&*path);
    }
    Ok(cfg)
}

pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse(&text, overrides, base).with_context(|| format!("in config {}", path.display()))
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not key=value"))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{p}` is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// A TOML literal if it parses as one, else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gcprune::oracle::DropMetric;

    const BASE: &str = r#"
model = "m.onnx"
exclusions = ["head_cls"]
[dataset]
kind = "toy"
arch = "toy_mt_a"
"#;

    #[test]
    fn defaults_and_paths() {
        let c = parse(BASE, &[], Path::new("/cfg")).unwrap();
        assert_eq!(c.model, PathBuf::from("/cfg/m.onnx"));
        assert_eq!(c.prune, PruneConfig::default());
        assert_eq!(c.oracle, OracleConfig::Builtin { probe_size: None });
        assert_eq!(c.sequence.ratios, vec![0.1, 0.3, 0.5]);
        assert!(matches!(c.dataset, DatasetConfig::Toy { samples: 128, seed: 0, .. }));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{BASE}\n[prune]\nalpah = 3.0\n");
        let err = parse(&text, &[], Path::new(".")).unwrap_err();
        assert!(format!("{err:#}").contains("alpah"));
        assert!(parse(&format!("colour = 1\n{BASE}"), &[], Path::new(".")).is_err());
    }

    #[test]
    fn overrides() {
        let sets = vec![
            "prune.reserved_ratio=0.5".to_string(),
            "prune.drop_metric=l2".to_string(),
            "oracle.kind=builtin".to_string(),
            "oracle.probe_size=16".to_string(),
        ];
        let c = parse(BASE, &sets, Path::new(".")).unwrap();
        assert_eq!(c.prune.reserved_ratio, 0.5);
        assert_eq!(c.prune.drop_metric, DropMetric::L2);
        assert_eq!(c.oracle, OracleConfig::Builtin { probe_size: Some(16) });
        assert!(parse(BASE, &["prune.alpha".to_string()], Path::new(".")).is_err());
        assert!(parse(BASE, &["prune.gamma=1.5".to_string()], Path::new(".")).is_err());
    }

    #[test]
    fn external_oracle_section() {
        let text = format!("{BASE}\n[oracle]\nkind = \"external\"\ncommand = [\"python3\", \"adapter.py\"]\n");
        let c = parse(&text, &[], Path::new(".")).unwrap();
        assert!(matches!(c.oracle, OracleConfig::External { timeout_secs: 300, .. }));
    }
}
