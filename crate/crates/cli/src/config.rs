//! Run configuration: one TOML file with `[model]`, `[train]`, `[prepare]`
//! and `[paths]` tables, every key optional. `--set table.key=value` flags
//! are applied on top of the file before it is validated, so any field can be
//! overridden without editing the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ppgnet::model::ModelConfig;
use ppgnet::prepare::PrepareOptions;
use ppgnet::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prepare: PrepareOptions,
    pub paths: Paths,
}

/// Default locations; command-line arguments take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads `path` (or starts from the defaults) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("config {} is not valid TOML", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let config: RunConfig = toml::Value::Table(root)
            .try_into()
            .context("invalid configuration")?;
        config.model.validate().context("invalid [model] table")?;
        config.train.validate().context("invalid [train] table")?;
        Ok(config)
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// `a.b.c=value`, where `value` is read as a TOML value and falls back to a
/// plain string (so `paths.out=runs/x` needs no quotes).
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} is not of the form key=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is malformed");
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let (last, parents) = path.split_last().expect("non-empty");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override {key:?}: {p:?} is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
