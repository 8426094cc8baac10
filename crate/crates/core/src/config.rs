//! Layered run configuration: built-in defaults, then a TOML file, then
//! `section.key=value` overrides. Unknown keys are rejected at every layer.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::diffnet::TrainParams;
use crate::error::{Error, Result};
use crate::metrics_report::{Connectivity, DEFAULT_PERCENTILE};
use crate::synthesizer::SynthesisConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "IMPRESSIONS_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Concurrent runs for multi-class synthesis.
    pub workers: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        let dir = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        OutputConfig { dir, workers: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub percentile: f64,
    pub connectivity: Connectivity,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { percentile: DEFAULT_PERCENTILE, connectivity: Connectivity::Eight }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub output: OutputConfig,
    pub train: TrainParams,
    pub synthesis: SynthesisConfig,
    pub metrics: MetricsConfig,
}

impl CliConfig {
    /// Defaults, overlaid with `file` (if any), overlaid with `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<CliConfig> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut table, &path, value)?;
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Missing keys take their defaults; unknown keys are errors.
    pub fn from_table(table: Table) -> Result<CliConfig> {
        let mut merged = Table::try_from(CliConfig::default()).expect("defaults serialize");
        merge(&mut merged, table);
        Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.output.workers == 0 {
            return Err(Error::Config("output.workers must be >= 1".into()));
        }
        if !(self.metrics.percentile > 0.0 && self.metrics.percentile < 100.0) {
            return Err(Error::Config("metrics.percentile must lie in (0, 100)".into()));
        }
        if self.train.batch_size == 0 || !(self.train.step_size > 0.0) {
            return Err(Error::Config("train.batch_size and train.step_size must be positive".into()));
        }
        self.synthesis.validate()
    }

    /// Effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string (`mode=sci` and `mode="sci"` are equivalent).
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form section.key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{s}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = table;
    for p in parents {
        let entry = t.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` is a value, not a section")))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}
