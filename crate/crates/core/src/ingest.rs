//! Dataset manifests, window loading, and window preprocessing.
//!
//! A manifest is a JSON document:
//!
//! ```json
//! {
//!   "name": "hhar-wrist",
//!   "sample_rate": 100.0,
//!   "window_samples": 200,
//!   "n_channels": 3,
//!   "labels": ["sit", "walk"],
//!   "eval_scheme": { "kind": "kfold", "k": 5 },
//!   "preprocess": { "upsample": 2, "standardize": true, "channel_strategy": "per-axis" },
//!   "records": [
//!     { "data": "windows.f32", "index": 0, "label": 1, "subject": "s01", "shape": [3, 200] }
//!   ]
//! }
//! ```
//!
//! `data` is resolved relative to the manifest. Binary blobs hold windows
//! back to back, each `n_channels × window_samples` little-endian f32 in
//! channel-major order; `index` picks the window. Files ending in `.csv`
//! hold one window, one row per sample and one column per channel, with an
//! optional header row.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest does not parse: {0}")]
    Parse(String),
    #[error("manifest failed validation:\n{}", fmt_issues(.0))]
    Validation(Vec<RecordIssue>),
    #[error("record {record}: {reason}")]
    Data { record: usize, reason: String },
}

/// One validation failure; `record` is `None` for manifest-level problems.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordIssue {
    pub record: Option<usize>,
    pub reason: String,
}

impl fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.record {
            Some(i) => write!(f, "record {i}: {}", self.reason),
            None => write!(f, "manifest: {}", self.reason),
        }
    }
}

fn fmt_issues(issues: &[RecordIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvalScheme {
    Loso,
    Kfold { k: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelStrategy {
    /// One waveform per channel; pooled embeddings are concatenated in channel order.
    #[default]
    PerAxis,
    /// Single waveform of the per-sample Euclidean norm across channels.
    Magnitude,
}

impl ChannelStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per-axis" => Some(Self::PerAxis),
            "magnitude" => Some(Self::Magnitude),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::PerAxis => "per-axis",
            Self::Magnitude => "magnitude",
        }
    }

    /// Waveforms produced per window.
    pub fn copies(self, n_channels: usize) -> usize {
        match self {
            Self::PerAxis => n_channels,
            Self::Magnitude => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    #[serde(default = "one")]
    pub upsample: usize,
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub channel_strategy: ChannelStrategy,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            upsample: 1,
            standardize: true,
            channel_strategy: ChannelStrategy::PerAxis,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    pub label: usize,
    #[serde(default)]
    pub subject: String,
    /// Declared `[channels, samples]`, checked eagerly when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub sample_rate: f64,
    pub window_samples: usize,
    pub n_channels: usize,
    pub labels: Vec<String>,
    pub eval_scheme: EvalScheme,
    #[serde(default)]
    pub preprocess: Preprocess,
    pub records: Vec<RecordEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// One labeled window, `channels[c][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowRecord {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: f64,
    pub label: usize,
    pub subject: String,
}

impl WindowRecord {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl DatasetManifest {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, IngestError> {
        let mut m: DatasetManifest =
            serde_json::from_str(text).map_err(|e| IngestError::Parse(e.to_string()))?;
        m.base_dir = base_dir.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Checks every invariant and reports all offending records at once.
    pub fn validate(&self) -> Result<(), IngestError> {
        let mut issues = Vec::new();
        let mut top = |reason: String| issues.push(RecordIssue { record: None, reason });
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            top(format!("sample_rate {} must be positive", self.sample_rate));
        }
        if self.window_samples == 0 {
            top("window_samples must be positive".into());
        }
        if self.n_channels == 0 {
            top("n_channels must be positive".into());
        }
        if self.labels.is_empty() {
            top("label vocabulary is empty".into());
        }
        if self.preprocess.upsample == 0 {
            top("preprocess.upsample must be at least 1".into());
        }
        if let EvalScheme::Kfold { k } = self.eval_scheme {
            if k < 2 {
                top(format!("kfold k = {k}, needs at least 2"));
            }
        }
        let loso = self.eval_scheme == EvalScheme::Loso;
        for (i, r) in self.records.iter().enumerate() {
            let mut bad = |reason: String| {
                issues.push(RecordIssue {
                    record: Some(i),
                    reason,
                })
            };
            if r.label >= self.labels.len() {
                bad(format!(
                    "label {} outside vocabulary of {}",
                    r.label,
                    self.labels.len()
                ));
            }
            if loso && r.subject.trim().is_empty() {
                bad("blank subject id under leave-one-subject-out".into());
            }
            if r.data.trim().is_empty() {
                bad("empty data locator".into());
            }
            if let Some([c, n]) = r.shape {
                if c != self.n_channels || n != self.window_samples {
                    bad(format!(
                        "shape [{c}, {n}] differs from manifest [{}, {}]",
                        self.n_channels, self.window_samples
                    ));
                }
            }
            if is_csv(&r.data) && r.index.unwrap_or(0) != 0 {
                bad("csv locators hold a single window; index must be 0".into());
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(IngestError::Validation(issues))
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn subjects(&self) -> Vec<String> {
        self.records.iter().map(|r| r.subject.clone()).collect()
    }

    /// Reads and shape-checks one record's samples.
    pub fn load_window(&self, index: usize) -> Result<WindowRecord, IngestError> {
        let r = self.records.get(index).ok_or_else(|| IngestError::Data {
            record: index,
            reason: "no such record".into(),
        })?;
        let path = self.base_dir.join(&r.data);
        let data_err = |reason: String| IngestError::Data {
            record: index,
            reason,
        };
        let channels = if is_csv(&r.data) {
            let text = std::fs::read_to_string(&path).map_err(|e| IngestError::Io {
                path: path.clone(),
                source: e,
            })?;
            parse_csv_window(&text).map_err(data_err)?
        } else {
            let per = self.n_channels * self.window_samples * 4;
            let bytes = std::fs::read(&path).map_err(|e| IngestError::Io {
                path: path.clone(),
                source: e,
            })?;
            let start = r.index.unwrap_or(0) * per;
            let raw = bytes
                .get(start..start + per)
                .ok_or_else(|| data_err(format!("{} is too small for window {}", r.data, r.index.unwrap_or(0))))?;
            let flat: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            flat.chunks(self.window_samples).map(<[f64]>::to_vec).collect()
        };
        if channels.len() != self.n_channels || channels.iter().any(|c| c.len() != self.window_samples) {
            return Err(data_err(format!(
                "window is {}x{}, manifest declares {}x{}",
                channels.len(),
                channels.first().map_or(0, Vec::len),
                self.n_channels,
                self.window_samples
            )));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(data_err("non-finite sample".into()));
        }
        Ok(WindowRecord {
            channels,
            sample_rate: self.sample_rate,
            label: r.label,
            subject: r.subject.clone(),
        })
    }
}

fn is_csv(locator: &str) -> bool {
    locator.to_ascii_lowercase().ends_with(".csv")
}

fn parse_csv_window(text: &str) -> Result<Vec<Vec<f64>>, String> {
    let mut channels: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if lineno == 0 => continue,
            Err(e) => return Err(format!("csv line {}: {e}", lineno + 1)),
        };
        if channels.is_empty() {
            channels = vec![Vec::new(); row.len()];
        }
        if row.len() != channels.len() {
            return Err(format!(
                "csv line {} has {} columns, expected {}",
                lineno + 1,
                row.len(),
                channels.len()
            ));
        }
        for (c, v) in channels.iter_mut().zip(row) {
            c.push(v);
        }
    }
    Ok(channels)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|e| IngestError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    DatasetManifest::from_json(&text, base)
}

/// Linear interpolation by an integer factor; the last segment repeats the
/// final sample. Sample rate scales by `factor`.
pub fn upsample(window: &WindowRecord, factor: usize) -> WindowRecord {
    let factor = factor.max(1);
    let f = factor as f64;
    let channels = window
        .channels
        .iter()
        .map(|x| {
            let mut out = Vec::with_capacity(x.len() * factor);
            for (i, &a) in x.iter().enumerate() {
                let b = x.get(i + 1).copied().unwrap_or(a);
                for j in 0..factor {
                    out.push(a + (b - a) * (j as f64 / f));
                }
            }
            out
        })
        .collect();
    WindowRecord {
        channels,
        sample_rate: window.sample_rate * f,
        label: window.label,
        subject: window.subject.clone(),
    }
}

pub const STANDARDIZE_EPS: f64 = 1e-8;

/// Per-channel zero mean, unit population variance; channels with variance
/// below [`STANDARDIZE_EPS`] become zeros.
pub fn standardize(window: &WindowRecord) -> WindowRecord {
    let channels = window
        .channels
        .iter()
        .map(|x| {
            let n = x.len().max(1) as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if var < STANDARDIZE_EPS {
                vec![0.0; x.len()]
            } else {
                let sd = var.sqrt();
                x.iter().map(|v| (v - mean) / sd).collect()
            }
        })
        .collect();
    WindowRecord {
        channels,
        ..window.clone()
    }
}

/// Mono waveforms for the encoder.
pub fn channelize(window: &WindowRecord, strategy: ChannelStrategy) -> Vec<Vec<f64>> {
    match strategy {
        ChannelStrategy::PerAxis => window.channels.clone(),
        ChannelStrategy::Magnitude => {
            let n = window.len();
            vec![(0..n)
                .map(|t| window.channels.iter().map(|c| c[t] * c[t]).sum::<f64>().sqrt())
                .collect()]
        }
    }
}

/// Upsample, optionally standardize, then channelize.
pub fn prepare(window: &WindowRecord, pre: &Preprocess) -> Vec<Vec<f64>> {
    let w = upsample(window, pre.upsample);
    let w = if pre.standardize { standardize(&w) } else { w };
    channelize(&w, pre.channel_strategy)
}
