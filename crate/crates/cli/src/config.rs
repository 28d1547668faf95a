//! Pipeline configuration file, dotted overrides and validation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bsrnn::bandscheme::SchemeConfig;
use bsrnn::datagen::DataConfig;
use bsrnn::energymeter::HardwareSpec;
use bsrnn::inference::InferenceConfig;
use bsrnn::trainer::TrainConfig;
use bsrnn::{FrameParams, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::UserError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreKind {
    /// Load every stem into memory up front.
    Memory,
    /// Read chunks from disk on demand.
    Disk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dataset_root: Option<PathBuf>,
    pub scheme_file: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub sample_rate: u32,
    pub precision: Precision,
    pub store: StoreKind,
    /// Name recorded in run reports.
    pub label: String,
    pub frame: FrameParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub inference: InferenceConfig,
    pub hardware: HardwareSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            scheme_file: None,
            output_dir: PathBuf::from("runs"),
            seed: 0,
            sample_rate: 44_100,
            precision: Precision::F32,
            store: StoreKind::Memory,
            label: "base".into(),
            frame: FrameParams::default(),
            model: ModelConfig::base(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            inference: InferenceConfig::default(),
            hardware: HardwareSpec::default(),
        }
    }
}

/// Sets `path` (dot separated) inside `root`, creating tables on the way.
fn set_dotted(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| UserError(format!("empty override key {path:?}")))?;
    let mut table = root;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| UserError(format!("override {path:?}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses `key=value`; the value is read as a TOML literal and falls back to a bare string.
pub fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| UserError(format!("override {text:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

impl PipelineConfig {
    /// Reads `path` (or defaults), applies overrides in order and validates.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| UserError(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            set_dotted(&mut table, k, v.clone())?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| UserError(format!("invalid configuration: {e}")))?;
        if let Some(dir) = path.and_then(Path::parent) {
            cfg.scheme_file = cfg.scheme_file.map(|f| if f.is_relative() { dir.join(f) } else { f });
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |r: bsrnn::Result<()>| r.map_err(|e| UserError(e.to_string()));
        check(self.frame.validate())?;
        check(self.model.validate())?;
        check(self.train.validate())?;
        check(self.data.validate())?;
        check(self.inference.validate())?;
        check(self.hardware.validate())?;
        if self.sample_rate == 0 {
            bail!(UserError("sample_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn schemes(&self) -> Result<Option<SchemeConfig>> {
        self.scheme_file
            .as_deref()
            .map(|p| SchemeConfig::load(p).map_err(|e| UserError(format!("scheme file: {e}")).into()))
            .transpose()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
