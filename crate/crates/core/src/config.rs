//! Run configuration read from TOML.
//!
//! ```toml
//! [dataset]            # EpisodeSpec
//! dim = 64
//! [dataset.episodes]
//! train = 2000
//! [model]              # MimicConfig
//! depth = 2
//! [train]              # TrainConfig
//! max_lr = 3e-3
//! [method]             # MethodSpec
//! method = "svm"
//! [method.svm]
//! c = 1.0
//! ```
//!
//! Any field can be overridden with a dotted key, e.g.
//! `train.batch_size=16` or `method.normalization="none"`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::DEFAULT_TAU;
use crate::error::{Error, Result};
use crate::eval::{MethodSpec, SweepAxis};
use crate::mimic::MimicConfig;
use crate::optim::TrainConfig;
use crate::synthetic::EpisodeSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub levels: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            axis: SweepAxis::SupportCount,
            levels: vec![2, 3, 4, 5, 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub hidden: usize,
    pub out_dim: usize,
    pub tau: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            hidden: 128,
            out_dim: 64,
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    /// Parent of the per-run directories.
    pub out_dir: PathBuf,
    /// Episode file used by train/eval/sweep.
    pub data: Option<PathBuf>,
    pub splits: Vec<String>,
    /// Evaluation seeds; each seed is one run in the report.
    pub seeds: Vec<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            out_dir: PathBuf::from("runs"),
            data: None,
            splits: vec!["test".into()],
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: EpisodeSpec,
    pub model: MimicConfig,
    pub train: TrainConfig,
    pub method: MethodSpec,
    pub sweep: SweepSection,
    pub encoder: EncoderSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply `key=value` overrides. The value is read as a TOML literal and
    /// falls back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<RunConfig> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut root, key.trim(), parse_literal(raw.trim()))?;
        }
        toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
