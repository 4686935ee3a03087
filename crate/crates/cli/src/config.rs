//! Run configuration: file (TOML or JSON) first, flags on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xmodal::baseline::ForestConfig;
use xmodal::evalkit::Metric;
use xmodal::extract::Pooling;
use xmodal::filterscope::BandThresholds;
use xmodal::ingest::{ChannelStrategy, EvalScheme};
use xmodal::lora::LoraConfig;
use xmodal::probe::{ProbeKind, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoraLayerMode {
    /// One run per adapted layer, probing that layer.
    #[default]
    OneAtATime,
    /// A single run with adapters on every selected layer.
    All,
}

impl LoraLayerMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "one-at-a-time" => Some(Self::OneAtATime),
            "all" => Some(Self::All),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizConfig {
    pub top_k: usize,
    pub n_fft: usize,
    /// Explicit filter indices; overrides `top_k`.
    pub filters: Option<Vec<usize>>,
    pub thresholds: BandThresholds,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self {
            top_k: 8,
            n_fft: 512,
            filters: None,
            thresholds: BandThresholds::default(),
        }
    }
}

/// Everything that determines a run's outputs. Output location and thread
/// count are accepted but never echoed, since they do not change results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub fixture: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub jobs: Option<usize>,
    pub layers: Vec<usize>,
    pub probe: ProbeKind,
    pub pooling: Pooling,
    /// Overrides the manifest's channel strategy when set.
    pub channel_strategy: Option<ChannelStrategy>,
    /// Overrides the manifest's evaluation scheme when set.
    pub scheme: Option<EvalScheme>,
    pub standardize: bool,
    pub split_seed: u64,
    pub metric: Metric,
    pub train: TrainConfig,
    pub forest: ForestConfig,
    pub lora: LoraConfig,
    pub lora_layers: LoraLayerMode,
    /// Cross-validate adapter training as well as fitting on all records.
    pub lora_cv: bool,
    pub viz: VizConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            manifest: None,
            checkpoint: None,
            cache: None,
            fixture: None,
            out: None,
            jobs: None,
            layers: Vec::new(),
            probe: ProbeKind::Mlp,
            pooling: Pooling::Mean,
            channel_strategy: None,
            scheme: None,
            standardize: true,
            split_seed: 0,
            metric: Metric::MacroF1,
            train: TrainConfig::default(),
            forest: ForestConfig::default(),
            lora: LoraConfig::default(),
            lora_layers: LoraLayerMode::default(),
            lora_cv: false,
            viz: VizConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file. A JSON artifact with an embedded `config`
    /// object is accepted too, which is how runs are reproduced.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        let bad = |e: &dyn std::fmt::Display| CliError::validation(format!("config {}: {e}", path.display()));
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        if is_toml {
            return toml::from_str(&text).map_err(|e| bad(&e));
        }
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
        let value = match value.get("config") {
            Some(inner @ serde_json::Value::Object(_)) => inner.clone(),
            _ => value,
        };
        serde_json::from_value(value).map_err(|e| bad(&e))
    }

    /// The configuration as embedded in artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    pub fn require_manifest(&self) -> Result<&Path, CliError> {
        self.manifest
            .as_deref()
            .ok_or_else(|| CliError::validation("a manifest is required (--manifest)"))
    }

    pub fn require_checkpoint(&self) -> Result<&Path, CliError> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| CliError::validation("a checkpoint is required (--checkpoint)"))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("xmodal-out"))
    }
}
