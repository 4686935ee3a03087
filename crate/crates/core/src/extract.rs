//! Encoder-driven embedding extraction with a resumable on-disk cache.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::{encode, EncoderConfig, EncoderError, EncoderWeights};
use crate::ingest::{self, ChannelStrategy, DatasetManifest, IngestError, Preprocess};
use crate::numkit::{Tensor, TensorError};
use crate::scalar::Scalar;
use crate::weight_io::{
    encode_config, read_container, weights_checksum, write_container, CheckpointError, Container, ContainerKind,
};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("cannot pool an empty frame sequence")]
    EmptySequence,
    #[error("stale cache at {path}: {reason}")]
    StaleCache { path: String, reason: String },
    #[error("layer {layer} not in cache (cached layers: {available:?})")]
    MissingLayer { layer: usize, available: Vec<usize> },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Container(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

impl Pooling {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(Self::Mean),
            "max" => Some(Self::Max),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Max => "max",
        }
    }
}

/// Collapses `frames: T×D` over time.
pub fn pool<T: Scalar>(frames: &Tensor<T>, method: Pooling) -> Result<Vec<T>, ExtractError> {
    let (t, d) = frames.dims2("pool")?;
    if t == 0 || d == 0 {
        return Err(ExtractError::EmptySequence);
    }
    let mut out = frames.row(0).to_vec();
    for i in 1..t {
        for (o, &v) in out.iter_mut().zip(frames.row(i)) {
            match method {
                Pooling::Mean => *o += v,
                Pooling::Max => *o = o.max(v),
            }
        }
    }
    if method == Pooling::Mean {
        let n = T::of(t as f64);
        out.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub layers: BTreeSet<usize>,
    pub pooling: Pooling,
    pub preprocess: Preprocess,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub record: usize,
    pub label: usize,
    pub subject: String,
    pub vectors: BTreeMap<usize, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    pub manifest_fingerprint: String,
    pub checkpoint_fingerprint: String,
    pub options: ExtractOptions,
    /// Sorted by record index.
    pub records: Vec<EmbeddingRecord>,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    manifest_fingerprint: String,
    checkpoint_fingerprint: String,
    options: ExtractOptions,
    records: Vec<CacheRow>,
}

#[derive(Serialize, Deserialize)]
struct CacheRow {
    record: usize,
    label: usize,
    subject: String,
}

impl EmbeddingCache {
    pub fn layers(&self) -> Vec<usize> {
        self.options.layers.iter().copied().collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn subjects(&self) -> Vec<String> {
        self.records.iter().map(|r| r.subject.clone()).collect()
    }

    /// Embeddings for `layer` as rows in record order.
    pub fn matrix(&self, layer: usize) -> Result<Tensor<f64>, ExtractError> {
        if !self.options.layers.contains(&layer) {
            return Err(ExtractError::MissingLayer {
                layer,
                available: self.layers(),
            });
        }
        let rows: Vec<Vec<f64>> = self.records.iter().map(|r| r.vectors[&layer].clone()).collect();
        Ok(Tensor::from_rows(&rows)?)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ContainerKind::EmbeddingCache);
        let meta = CacheMeta {
            manifest_fingerprint: self.manifest_fingerprint.clone(),
            checkpoint_fingerprint: self.checkpoint_fingerprint.clone(),
            options: self.options.clone(),
            records: self
                .records
                .iter()
                .map(|r| CacheRow {
                    record: r.record,
                    label: r.label,
                    subject: r.subject.clone(),
                })
                .collect(),
        };
        c.meta = serde_json::to_string(&meta).expect("cache meta serializes");
        if !self.records.is_empty() {
            for &layer in &self.options.layers {
                let dim = self.records[0].vectors[&layer].len();
                let data: Vec<f64> = self.records.iter().flat_map(|r| r.vectors[&layer].clone()).collect();
                c.push(format!("layer.{layer}"), &Tensor::from_parts(vec![self.records.len(), dim], data));
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, ExtractError> {
        c.expect_kind(ContainerKind::EmbeddingCache)?;
        let meta: CacheMeta =
            serde_json::from_str(&c.meta).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let mut records: Vec<EmbeddingRecord> = meta
            .records
            .into_iter()
            .map(|r| EmbeddingRecord {
                record: r.record,
                label: r.label,
                subject: r.subject,
                vectors: BTreeMap::new(),
            })
            .collect();
        if !records.is_empty() {
            for &layer in &meta.options.layers {
                let name = format!("layer.{layer}");
                let t: Tensor<f64> = c
                    .get(&name)
                    .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?
                    .to();
                if t.rank() != 2 || t.shape()[0] != records.len() {
                    return Err(CheckpointError::corrupt(&name, "row count differs from record list").into());
                }
                for (i, r) in records.iter_mut().enumerate() {
                    r.vectors.insert(layer, t.row(i).to_vec());
                }
            }
        }
        Ok(Self {
            manifest_fingerprint: meta.manifest_fingerprint,
            checkpoint_fingerprint: meta.checkpoint_fingerprint,
            options: meta.options,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ExtractError> {
        Ok(write_container(&self.to_container(), path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ExtractError> {
        Self::from_container(&read_container(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub record: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub computed: usize,
    pub cached: usize,
    pub failed: Vec<RecordFailure>,
}

impl ExtractReport {
    pub fn succeeded(&self) -> bool {
        self.failed.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "{} computed, {} cached, {} failed",
            self.computed,
            self.cached,
            self.failed.len()
        )
    }
}

/// SHA-256 over the manifest JSON and the bytes of every referenced data file.
pub fn manifest_fingerprint(manifest: &DatasetManifest) -> Result<String, ExtractError> {
    let mut h = Sha256::new();
    h.update(manifest.to_json().as_bytes());
    let files: BTreeSet<&str> = manifest.records.iter().map(|r| r.data.as_str()).collect();
    for f in files {
        let path = manifest.base_dir.join(f);
        let bytes = std::fs::read(&path).map_err(|e| IngestError::Io { path, source: e })?;
        h.update((f.len() as u64).to_le_bytes());
        h.update(f.as_bytes());
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

/// SHA-256 over the config block and the weight checksum.
pub fn checkpoint_fingerprint<T: Scalar>(config: &EncoderConfig, weights: &EncoderWeights<T>) -> String {
    let mut h = Sha256::new();
    h.update(encode_config(config));
    h.update(weights_checksum(weights).as_bytes());
    hex::encode(h.finalize())
}

/// Short stable name for a cache built from these inputs.
pub fn cache_key(manifest_fingerprint: &str, checkpoint_fingerprint: &str, options: &ExtractOptions) -> String {
    let mut h = Sha256::new();
    h.update(manifest_fingerprint.as_bytes());
    h.update(checkpoint_fingerprint.as_bytes());
    h.update(serde_json::to_string(options).expect("options serialize").as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

/// Encodes prepared waveforms and pools each requested layer; per-axis
/// channels are concatenated in channel order.
pub fn embed_window<T: Scalar>(
    waveforms: &[Vec<f64>],
    weights: &EncoderWeights<T>,
    config: &EncoderConfig,
    layers: &BTreeSet<usize>,
    pooling: Pooling,
) -> Result<BTreeMap<usize, Vec<f64>>, ExtractError> {
    let mut out: BTreeMap<usize, Vec<f64>> = layers.iter().map(|&l| (l, Vec::new())).collect();
    for wave in waveforms {
        let x: Vec<T> = wave.iter().map(|&v| T::of(v)).collect();
        let hs = encode(&x, weights, config, layers, None)?;
        for (&l, frames) in hs.layers() {
            let v = pool(frames, pooling)?;
            out.get_mut(&l)
                .expect("requested layer")
                .extend(v.into_iter().map(Scalar::f64));
        }
    }
    Ok(out)
}

const WRITE_EVERY: usize = 64;

/// Extracts pooled embeddings for every manifest record. An existing cache
/// at `cache_path` with matching fingerprints is resumed; records that fail
/// are listed in the report and left out of the cache.
pub fn extract_embeddings<T: Scalar>(
    manifest: &DatasetManifest,
    config: &EncoderConfig,
    weights: &EncoderWeights<T>,
    options: &ExtractOptions,
    cache_path: Option<&Path>,
) -> Result<(EmbeddingCache, ExtractReport), ExtractError> {
    for &l in &options.layers {
        if l > config.n_layers {
            return Err(EncoderError::InvalidTap {
                tap: l,
                max: config.n_layers,
            }
            .into());
        }
    }
    let mf = manifest_fingerprint(manifest)?;
    let cf = checkpoint_fingerprint(config, weights);
    let mut cache = match cache_path.filter(|p| p.exists()) {
        Some(p) => {
            let c = EmbeddingCache::load(p)?;
            let stale = |reason: &str| ExtractError::StaleCache {
                path: p.display().to_string(),
                reason: reason.to_string(),
            };
            if c.manifest_fingerprint != mf {
                return Err(stale("manifest or data files changed"));
            }
            if c.checkpoint_fingerprint != cf {
                return Err(stale("checkpoint changed"));
            }
            if c.options != *options {
                return Err(stale("extraction options differ"));
            }
            c
        }
        None => EmbeddingCache {
            manifest_fingerprint: mf,
            checkpoint_fingerprint: cf,
            options: options.clone(),
            records: Vec::new(),
        },
    };

    let done: BTreeSet<usize> = cache.records.iter().map(|r| r.record).collect();
    let mut report = ExtractReport {
        cached: done.len(),
        ..Default::default()
    };
    let todo: Vec<usize> = (0..manifest.len()).filter(|i| !done.contains(i)).collect();
    for chunk in todo.chunks(WRITE_EVERY) {
        let results: Vec<(usize, Result<EmbeddingRecord, ExtractError>)> = chunk
            .par_iter()
            .map(|&i| {
                let r = manifest.load_window(i).map_err(ExtractError::from).and_then(|w| {
                    let waves = ingest::prepare(&w, &options.preprocess);
                    let vectors = embed_window(&waves, weights, config, &options.layers, options.pooling)?;
                    Ok(EmbeddingRecord {
                        record: i,
                        label: w.label,
                        subject: w.subject,
                        vectors,
                    })
                });
                (i, r)
            })
            .collect();
        for (i, r) in results {
            match r {
                Ok(rec) => {
                    cache.records.push(rec);
                    report.computed += 1;
                }
                Err(e) => report.failed.push(RecordFailure {
                    record: i,
                    reason: e.to_string(),
                }),
            }
        }
        cache.records.sort_by_key(|r| r.record);
        if let Some(p) = cache_path {
            cache.save(p)?;
        }
    }
    if todo.is_empty() {
        if let Some(p) = cache_path.filter(|p| !p.exists()) {
            cache.save(p)?;
        }
    }
    Ok((cache, report))
}

/// Default pooled embedding length.
pub fn embedding_dim(config: &EncoderConfig, strategy: ChannelStrategy, n_channels: usize) -> usize {
    config.d_model * strategy.copies(n_channels)
}
