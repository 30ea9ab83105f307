//! Run configuration: everything needed to reproduce a run from one seed.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::{MixKind, SdaConfig};
use crate::mining::ConfidenceThresholds;
use crate::model::ModelSpec;
use crate::trainer::TrainConfig;
use crate::volume::{SliceSamplingPlan, SparsityConfig, SynthSpec};
use crate::{Error, Result};

/// Either a synthetic survey or raw volumes on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synth: SynthSpec,
    /// When set, read amplitudes from here instead of synthesizing.
    pub volume: Option<PathBuf>,
    pub volume_header: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub labels_header: Option<PathBuf>,
    /// Standardize amplitudes over the whole volume before slicing.
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            volume: None,
            volume_header: None,
            labels: None,
            labels_header: None,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// One validation slice per this many held-out slices.
    pub validation_per: usize,
    pub batch_size: usize,
    /// Write a PNG per predicted test slice.
    pub write_images: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            validation_per: 100,
            batch_size: 4,
            write_images: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Seeds model initialization and training; the synthetic survey has its own seed.
    pub seed: u64,
    pub data: DataConfig,
    pub plan: SliceSamplingPlan,
    /// Applied to the labeled slices in `SparseConSemiSup` mode.
    pub sparsity: SparsityConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub sda: SdaConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            data: DataConfig::default(),
            plan: SliceSamplingPlan::default(),
            sparsity: SparsityConfig {
                keep_fraction: 0.5,
                seed: 0,
            },
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            sda: SdaConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 3] = ["seam", "f3", "desk"];

impl RunConfig {
    /// Named starting points. `seam` and `f3` carry survey-specific
    /// hyperparameters; `desk` is a small synthetic setup for CPU runs.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self {
            name: name.to_string(),
            ..Self::default()
        };
        match name {
            "seam" => {
                c.train.tau = 0.5;
                c.train.thresholds = ConfidenceThresholds { t_w: 0.7, t_s: 0.9 };
                c.train.base_lr = 1e-3;
                c.sda.kind = MixKind::CutMix;
            }
            "f3" => {
                c.train.tau = 1.0;
                c.train.thresholds = ConfidenceThresholds { t_w: 0.7, t_s: 0.95 };
                c.train.base_lr = 1e-4;
                c.sda.kind = MixKind::ClassMix;
            }
            "desk" => {
                c.train.tau = 0.1;
                c.train.thresholds = ConfidenceThresholds { t_w: 0.7, t_s: 0.9 };
                c.train.base_lr = 1e-3;
                c.train.steps_per_epoch = Some(25);
                // With the literal smoothing and six classes the training optimum
                // sits below t_w, so no confident region would ever form.
                c.train.normalized_smoothing = true;
                c.sda.kind = MixKind::CutMix;
                c.plan = SliceSamplingPlan { stride: 64, offset: 0 };
                c.model = ModelSpec {
                    rep_dim: 32,
                    ..ModelSpec::default()
                };
                c.eval.validation_per = 100;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        if self.eval.validation_per == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("eval.validation_per and eval.batch_size must be positive".into()));
        }
        let paths = [&self.data.volume, &self.data.labels];
        if paths.iter().filter(|p| p.is_some()).count() == 1 {
            return Err(Error::Config("data.volume and data.labels must be given together".into()));
        }
        if self.data.synth.layers != self.model.classes && self.data.volume.is_none() {
            return Err(Error::Config(format!(
                "synthetic survey has {} facies but the model predicts {} classes",
                self.data.synth.layers, self.model.classes
            )));
        }
        Ok(())
    }

    /// Trainer settings with the run seed and SDA table folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            sda: self.sda.clone(),
            ..self.train.clone()
        }
    }

    pub fn to_toml_value(&self) -> Result<toml::Value> {
        toml::Value::try_from(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn from_toml_value(value: toml::Value) -> Result<Self> {
        value.try_into().map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Applies `key.path = value` overrides in order and re-validates the
    /// result. Values are read as TOML literals; anything that does not parse
    /// as one is taken as a bare string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = self.to_toml_value()?;
        for (key, raw) in overrides {
            set_dotted(&mut v, key, parse_literal(raw))?;
        }
        Self::from_toml_value(v)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not inside a table")))?;
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {key:?} does not name a table field")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
