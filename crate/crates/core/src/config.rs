//! Experiment configuration: a TOML file whose every key can be overridden
//! by a `--section.key value` flag.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, load_dataset, EmbeddingDataset, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::trainer::{default_tau_grid, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset file. Empty means the synthetic generator is used.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    /// Checkpoint to evaluate. Empty means `<out>/checkpoint.trml`.
    pub checkpoint: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            checkpoint: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// Explicit heatmap ids; when empty, `heatmap_count` ids are drawn from
    /// the evaluation split.
    pub heatmap_ids: Vec<String>,
    pub heatmap_count: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            heatmap_ids: Vec::new(),
            heatmap_count: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Number of seeds, counted up from `train.seed`.
    pub seeds: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub taus: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            taus: default_tau_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TTestConfig {
    pub a: String,
    pub b: String,
    pub column: String,
}

impl Default for TTestConfig {
    fn default() -> Self {
        Self {
            a: String::new(),
            b: String::new(),
            column: "mae".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Output directory.
    pub out: String,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub export: ExportConfig,
    pub ablate: AblateConfig,
    pub sweep: SweepConfig,
    pub ttest: TTestConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out: "runs/default".into(),
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            export: ExportConfig::default(),
            ablate: AblateConfig::default(),
            sweep: SweepConfig::default(),
            ttest: TTestConfig::default(),
        }
    }
}

/// Dotted key paths of every scalar or array setting, e.g. `train.lr`.
pub fn config_keys() -> Vec<String> {
    let table = toml::Table::try_from(ExperimentConfig::default()).expect("default config serializes");
    let mut keys = Vec::new();
    collect_keys(&table, "", &mut keys);
    keys
}

fn collect_keys(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => collect_keys(t, &path, out),
            _ => out.push(path),
        }
    }
}

/// Reads `raw` as a TOML value; anything that does not parse is taken as a
/// bare string.
fn parse_override(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(format!("empty key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("key {key:?}: {p:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text and applies `(key, raw value)` overrides in order.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config: {}", e.message())))?;
        for (key, raw) in overrides {
            set_path(&mut table, key, parse_override(raw))?;
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out.is_empty() {
            return Err(Error::config("out must not be empty"));
        }
        if self.data.path.is_empty() {
            self.synthetic.validate()?;
        }
        self.train.validate()?;
        if self.ablate.seeds < 2 {
            return Err(Error::config("ablate.seeds must be >= 2 for the paired t-test"));
        }
        Ok(())
    }

    /// Fully resolved TOML, as written to `config.resolved`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolved configuration minus the `out` entry, one line per entry.
    pub fn echo_lines(&self) -> Vec<String> {
        self.to_toml()
            .lines()
            .filter(|l| !l.starts_with("out = "))
            .map(str::to_owned)
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.eval.checkpoint.is_empty() {
            self.out_dir().join("checkpoint.trml")
        } else {
            PathBuf::from(&self.eval.checkpoint)
        }
    }

    /// Loads `data.path`, or generates the synthetic dataset when it is empty.
    pub fn dataset(&self) -> Result<EmbeddingDataset> {
        if self.data.path.is_empty() {
            generate_synthetic(&self.synthetic)
        } else {
            load_dataset(&self.data.path)
        }
    }
}
