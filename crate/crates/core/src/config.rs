//! Run configuration: named presets, TOML/JSON config files and
//! `section.key=value` overrides, merged in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{CarlError, Result};
use crate::mccl::MccLConfig;
use crate::ptd::PtdConfig;
use crate::trainer::{CarlConfig, TrainConfig};

pub const PRESETS: [&str; 3] = ["paper", "desk", "smoke"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    /// Separate evaluation corpus; when absent a held-out split is used.
    pub eval_corpus: Option<PathBuf>,
    pub holdout_frac: f64,
    /// Native label range of the corpus files, mapped onto [-1, 1].
    pub label_lo: f64,
    pub label_hi: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            eval_corpus: None,
            holdout_frac: 0.2,
            label_lo: -1.0,
            label_hi: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub encoder: EncoderConfig,
    pub mccl: MccLConfig,
    pub ptd: PtdConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn carl(&self) -> CarlConfig {
        CarlConfig {
            encoder: self.encoder.clone(),
            mccl: self.mccl.clone(),
            ptd: self.ptd.clone(),
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.carl().validate().map_err(|e| CarlError::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.data.holdout_frac) {
            return Err(CarlError::Config(format!("data.holdout_frac {} not in [0,1)", self.data.holdout_frac)));
        }
        if !(self.data.label_lo < self.data.label_hi) {
            return Err(CarlError::Config("data.label_lo must be below data.label_hi".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CarlError::Config(e.to_string()))
    }
}

/// Fully populated configuration for a named preset.
pub fn preset(name: &str) -> Result<RunConfig> {
    let base = RunConfig {
        preset: name.to_string(),
        encoder: EncoderConfig::default(),
        mccl: MccLConfig::default(),
        ptd: PtdConfig::paper(),
        train: TrainConfig::default(),
        data: DataConfig::default(),
    };
    match name {
        "paper" => Ok(RunConfig {
            encoder: EncoderConfig {
                max_len: 128,
                ..base.encoder
            },
            ..base
        }),
        "desk" => Ok(RunConfig {
            encoder: EncoderConfig {
                max_len: 32,
                ..base.encoder
            },
            train: TrainConfig {
                lr_peak: 1e-3,
                batch_size: 16,
                ..base.train
            },
            ..base
        }),
        "smoke" => Ok(RunConfig {
            encoder: EncoderConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                d_ff: 64,
                max_len: 32,
                d_proj: 32,
                dropout_p: 0.1,
                ..base.encoder
            },
            mccl: MccLConfig {
                m_initial: 0.99,
                temperature_sim: 0.05,
                temperature_label: 0.5,
            },
            ptd: PtdConfig::smoke(),
            train: TrainConfig {
                lr_peak: 3e-3,
                epochs: 40,
                batch_size: 16,
                ..base.train
            },
            ..base
        }),
        other => Err(CarlError::Config(format!(
            "unknown preset `{other}`; valid presets: {}",
            PRESETS.join(", ")
        ))),
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads a TOML file, or JSON when the extension is `.json`.
pub fn read_config_file(path: &Path) -> Result<toml::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CarlError::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value = if is_json {
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CarlError::Config(format!("{}: {e}", path.display())))?;
        toml::Value::try_from(json).map_err(|e| CarlError::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str::<toml::Table>(&text)
            .map(toml::Value::Table)
            .map_err(|e| CarlError::Config(format!("{}: {e}", path.display())))?
    };
    if !value.is_table() {
        return Err(CarlError::Config(format!("{}: top level must be a table", path.display())));
    }
    Ok(value)
}

/// Parses one `section.key=value` override. The value is read as a TOML
/// literal, falling back to a plain string.
pub fn parse_override(spec: &str) -> Result<toml::Value> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CarlError::Config(format!("override `{spec}` is not of the form section.key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut out = value;
    for part in key.trim().rsplit('.') {
        if part.is_empty() {
            return Err(CarlError::Config(format!("override `{spec}` has an empty key segment")));
        }
        let mut t = toml::Table::new();
        t.insert(part.to_string(), out);
        out = toml::Value::Table(t);
    }
    Ok(out)
}

/// Resolves the final configuration: preset (from `preset_override`, the
/// file's `preset` key, or "desk"), then the file, then overrides.
pub fn resolve(file: Option<&Path>, preset_override: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let user = file.map(read_config_file).transpose()?;
    let mut layers = Vec::new();
    for o in overrides {
        layers.push(parse_override(o)?);
    }
    let from_file = user
        .as_ref()
        .and_then(|u| u.get("preset"))
        .and_then(|p| p.as_str())
        .map(str::to_string);
    let from_sets = layers
        .iter()
        .rev()
        .find_map(|l| l.get("preset").and_then(|p| p.as_str()).map(str::to_string));
    let name = preset_override
        .map(str::to_string)
        .or(from_sets)
        .or(from_file)
        .unwrap_or_else(|| "desk".to_string());
    let mut value = toml::Value::try_from(preset(&name)?).map_err(|e| CarlError::Config(e.to_string()))?;
    if let Some(u) = user {
        merge(&mut value, u);
    }
    for l in layers {
        merge(&mut value, l);
    }
    if let Some(t) = value.as_table_mut() {
        t.insert("preset".into(), toml::Value::String(name));
    }
    let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| CarlError::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
