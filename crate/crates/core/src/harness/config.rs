use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrator::CalibratorSpec;
use crate::error::{Error, Result};
use crate::handler::{HandlerConfig, HandlerMode};
use crate::nn::TrainConfig;
use crate::shift::{CorruptionSpec, LabelShiftKind, LabelShiftSpec, SyntheticSpec};
use crate::source::ClassifierSpec;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Overrides the output directory of a run.
pub const OUT_DIR_ENV: &str = "TABTTA_OUT_DIR";

/// Either CSV files with a schema or a synthetic generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub schema: Option<PathBuf>,
    pub source_csv: Option<PathBuf>,
    /// Labeled target rows; labels drive label-shift sampling and scoring only.
    pub target_csv: Option<PathBuf>,
}

/// One shifted test stream: an optional corruption followed by an optional
/// label-shift ordering.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub name: Option<String>,
    pub corruption: Option<CorruptionSpec>,
    pub label_shift: Option<LabelShiftSpec>,
}

impl ShiftConfig {
    pub fn display_name(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let mut parts = Vec::new();
        if let Some(c) = &self.corruption {
            parts.push(
                serde_json::to_value(c.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default(),
            );
        }
        if let Some(l) = &self.label_shift {
            parts.push(match l.kind {
                LabelShiftKind::ClassImbalance { .. } => "class_imbalance".into(),
                LabelShiftKind::Temporal { .. } => "temporal".into(),
            });
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    pub source_train: TrainConfig,
    pub classifier: ClassifierSpec,
    pub calibrator_train: TrainConfig,
    pub calibrator: CalibratorSpec,
    pub handler: HandlerConfig,
    pub shifts: Vec<ShiftConfig>,
    pub modes: Vec<HandlerMode>,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Rows of each sample used for the MMD diagnostic (evenly strided).
    pub mmd_max_rows: usize,
    /// Write one per-sample trace CSV per (seed, shift, mode).
    pub sample_traces: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            data: DataConfig::default(),
            source_train: TrainConfig::default(),
            classifier: ClassifierSpec::default(),
            calibrator_train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            calibrator: CalibratorSpec::default(),
            handler: HandlerConfig::default(),
            shifts: vec![ShiftConfig::default()],
            modes: vec![HandlerMode::SourceOnly, HandlerMode::Full],
            batch_size: 64,
            seeds: vec![0, 1, 2],
            mmd_max_rows: 1000,
            sample_traces: true,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Parses a config file; relative data and output paths are taken relative to it.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [
            &mut cfg.data.schema,
            &mut cfg.data.source_csv,
            &mut cfg.data.target_csv,
            &mut cfg.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported config schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let d = &self.data;
        match (&d.synthetic, &d.source_csv, &d.target_csv, &d.schema) {
            (Some(s), None, None, None) => s.validate()?,
            (None, Some(src), Some(tgt), Some(schema)) => {
                for p in [src, tgt, schema] {
                    if !p.is_file() {
                        return Err(Error::invalid(format!("data file {} does not exist", p.display())));
                    }
                }
            }
            (None, None, None, None) => {
                return Err(Error::invalid("config names neither data files nor a synthetic spec"))
            }
            _ => {
                return Err(Error::invalid(
                    "data needs either `synthetic` alone or all of `schema`, `source_csv`, `target_csv`",
                ))
            }
        }
        self.source_train.validate()?;
        self.calibrator_train.validate()?;
        self.handler.validate()?;
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.modes.is_empty() {
            return Err(Error::invalid("at least one handler mode is required"));
        }
        if self.shifts.is_empty() {
            return Err(Error::invalid("at least one shift entry is required"));
        }
        if self.mmd_max_rows < 2 {
            return Err(Error::invalid("mmd_max_rows must be at least 2"));
        }
        let mut names = HashSet::new();
        for s in &self.shifts {
            if let Some(c) = &s.corruption {
                c.validate()?;
            }
            if let Some(l) = &s.label_shift {
                l.validate()?;
            }
            let name = s.display_name();
            if name.is_empty() || name.contains(['/', '\\']) {
                return Err(Error::invalid(format!("invalid shift name `{name}`")));
            }
            if !names.insert(name.clone()) {
                return Err(Error::invalid(format!("duplicate shift name `{name}`")));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the config's JSON serialization.
    pub fn sha256(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }
}
