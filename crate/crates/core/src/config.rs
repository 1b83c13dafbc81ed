//! Run configuration files.
//!
//! A run file is TOML with four sections plus optional paths:
//!
//! ```toml
//! [model]            # ModelConfig; required
//! patch_depth = 4
//! # ...
//! [train]            # TrainConfig; every key optional
//! [sampler]          # SamplerConfig; every key optional
//! [dataset]          # ToyDatasetSpec; defaults to 3 solid colors at 16x16
//! [paths]
//! checkpoint_dir = "runs/toy"
//! metrics = "runs/toy/metrics.csv"
//! ```
//!
//! Unknown keys anywhere are rejected. Individual keys can be overridden
//! with dotted `section.key=value` assignments, where the value is parsed as
//! a TOML literal and falls back to a bare string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ToyDatasetSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::train::TrainConfig;

/// Output locations of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

/// Everything a train or sample invocation needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub dataset: ToyDatasetSpec,
    #[serde(default)]
    pub paths: Paths,
}

/// Parse a single override value: a TOML literal if it is one, else a string.
pub fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

/// Set `dotted.key` inside `table`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let (last, init) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for (i, p) in init.iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a table", parts[..=i].join("."))))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Apply `key=value` assignments in order.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[(String, String)]) -> Result<()> {
    for (k, v) in overrides {
        set_dotted(table, k, parse_value(v))?;
    }
    Ok(())
}

/// Split `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("expected key=value, got {s:?}"))),
    }
}

impl RunConfig {
    /// Build from an already-parsed table and validate.
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Section checks plus agreement between the model and the dataset.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.dataset.validate()?;
        let (m, d) = (&self.model, &self.dataset);
        let mismatch = |what: &str, a: String, b: String| {
            Err(Error::Config(format!("model.{what} = {a} but dataset.{what} = {b}")))
        };
        if m.resolution != d.resolution {
            return mismatch("resolution", format!("{:?}", m.resolution), format!("{:?}", d.resolution));
        }
        if m.num_classes != d.num_classes {
            return mismatch("num_classes", m.num_classes.to_string(), d.num_classes.to_string());
        }
        if m.channels != d.channels {
            return mismatch("channels", m.channels.to_string(), d.channels.to_string());
        }
        Ok(())
    }
}
