//! Binary checkpoint container and parity fixtures.

mod container;
mod parity;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::{required_tensors, EncoderConfig, EncoderError, EncoderWeights};
use crate::numkit::Tensor;
use crate::scalar::{DType, Scalar};

pub use container::{
    decode_config, encode_config, hex_dump, Container, ContainerKind, StoredTensor,
    FORMAT_VERSION, MAGIC,
};
pub use parity::{emit_fixture, verify_parity, LayerDeviation, ParityFixture, ParityReport};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a container file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown container kind {0}")]
    UnknownKind(u32),
    #[error("reserved header flags set: {0:#x}")]
    ReservedFlags(u32),
    #[error("expected a {expected} container, found a {found}")]
    WrongKind { expected: String, found: String },
    #[error("corrupt container{}: {reason}", fmt_tensor(.tensor))]
    Corrupt { tensor: String, reason: String },
    #[error("checkpoint config: {0}")]
    Config(#[from] EncoderError),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("fixture incompatible with checkpoint: {0}")]
    FixtureIncompatible(String),
    #[error("metadata: {0}")]
    Meta(String),
}

fn fmt_tensor(t: &str) -> String {
    if t.is_empty() {
        String::new()
    } else {
        format!(" (tensor `{t}`)")
    }
}

impl CheckpointError {
    pub(crate) fn corrupt(tensor: &str, reason: impl Into<String>) -> Self {
        Self::Corrupt {
            tensor: tensor.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn read_container(path: &Path) -> Result<Container, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::io(path, e))?;
    Container::from_bytes(&bytes)
}

pub fn write_container(container: &Container, path: &Path) -> Result<(), CheckpointError> {
    let bytes = container.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CheckpointError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CheckpointError::io(path, e))
}

/// Builds the checkpoint container. Directory order follows
/// [`required_tensors`]; values are stored as f32.
pub fn checkpoint_container<T: Scalar>(
    config: &EncoderConfig,
    tensors: &BTreeMap<String, Tensor<T>>,
    provenance: &str,
) -> Result<Container, CheckpointError> {
    config.validate()?;
    let mut c = Container::new(ContainerKind::Checkpoint);
    c.config = Some(config.clone());
    c.meta = provenance.to_string();
    for (name, shape) in required_tensors(config) {
        let t = tensors
            .get(&name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(EncoderError::WeightShape {
                name,
                expected: shape,
                found: t.shape().to_vec(),
            }
            .into());
        }
        c.tensors.push((name, StoredTensor::F32(t.cast())));
    }
    Ok(c)
}

pub fn save_checkpoint<T: Scalar>(
    config: &EncoderConfig,
    tensors: &BTreeMap<String, Tensor<T>>,
    path: &Path,
    provenance: &str,
) -> Result<(), CheckpointError> {
    write_container(&checkpoint_container(config, tensors, provenance)?, path)
}

pub fn checkpoint_from_container(
    c: &Container,
) -> Result<(EncoderConfig, EncoderWeights<f32>), CheckpointError> {
    c.expect_kind(ContainerKind::Checkpoint)?;
    let config = c
        .config
        .clone()
        .ok_or_else(|| CheckpointError::corrupt("", "checkpoint without config block"))?;
    config.validate()?;
    let mut map = BTreeMap::new();
    for (name, t) in &c.tensors {
        let StoredTensor::F32(t) = t else {
            return Err(CheckpointError::corrupt(name, "checkpoint tensors must be f32"));
        };
        if map.insert(name.clone(), t.clone()).is_some() {
            return Err(CheckpointError::corrupt(name, "duplicate tensor name"));
        }
    }
    let weights = EncoderWeights::new(&config, map).map_err(|e| match e {
        EncoderError::MissingWeight(n) => CheckpointError::corrupt(&n, "required tensor missing from directory"),
        EncoderError::WeightShape { name, expected, found } => {
            CheckpointError::corrupt(&name, format!("shape {found:?}, config requires {expected:?}"))
        }
        EncoderError::UnexpectedWeight(n) => CheckpointError::corrupt(&n, "tensor not required by config"),
        other => other.into(),
    })?;
    Ok((config, weights))
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderConfig, EncoderWeights<f32>), CheckpointError> {
    checkpoint_from_container(&read_container(path)?)
}

/// Provenance string of a checkpoint file.
pub fn checkpoint_provenance(path: &Path) -> Result<String, CheckpointError> {
    Ok(read_container(path)?.meta)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_fingerprint(path: &Path) -> Result<String, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// SHA-256 over tensor names, shapes and values in name order.
pub fn weights_checksum<T: Scalar>(weights: &EncoderWeights<T>) -> String {
    tensors_checksum(weights.tensors())
}

pub fn tensors_checksum<T: Scalar>(tensors: &BTreeMap<String, Tensor<T>>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        buf.clear();
        t.data().iter().for_each(|v| v.write_le(&mut buf));
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

pub(crate) fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (EncoderConfig, EncoderWeights<f32>) {
        let cfg = EncoderConfig::toy(16, 1);
        let w = EncoderWeights::<f32>::random(&cfg, 5).unwrap();
        (cfg, w)
    }

    #[test]
    fn round_trip_is_bit_exact_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, w) = toy();
        let p1 = dir.path().join("a.xmc");
        let p2 = dir.path().join("b.xmc");
        save_checkpoint(&cfg, w.tensors(), &p1, "unit test").unwrap();
        save_checkpoint(&cfg, w.tensors(), &p2, "unit test").unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let (cfg2, w2) = load_checkpoint(&p1).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(w, w2);
        assert_eq!(checkpoint_provenance(&p1).unwrap(), "unit test");
    }

    #[test]
    fn directory_lists_exactly_required_tensors() {
        let (cfg, w) = toy();
        let c = checkpoint_container(&cfg, w.tensors(), "").unwrap();
        let names: Vec<_> = c.tensors.iter().map(|(n, _)| n.clone()).collect();
        let req: Vec<_> = required_tensors(&cfg).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, req);
    }

    #[test]
    fn missing_ffn_matrix_is_named_on_save() {
        let (cfg, w) = toy();
        let mut map = w.into_tensors();
        map.remove("layers.1.ffn.out.weight");
        match checkpoint_container(&cfg, &map, "") {
            Err(CheckpointError::MissingTensor(n)) => assert_eq!(n, "layers.1.ffn.out.weight"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let (cfg, w) = toy();
        let bytes = checkpoint_container(&cfg, w.tensors(), "").unwrap().to_bytes().unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 40] {
            let err = Container::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Corrupt { .. }), "{cut}: {err}");
        }
        assert!(matches!(
            Container::from_bytes(b"XMOD"),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn bad_magic_version_and_flags() {
        let (cfg, w) = toy();
        let bytes = checkpoint_container(&cfg, w.tensors(), "").unwrap().to_bytes().unwrap();
        let mut b = bytes.clone();
        b[0] = b'Y';
        assert!(matches!(Container::from_bytes(&b), Err(CheckpointError::BadMagic)));
        let mut b = bytes.clone();
        b[8] = 2;
        assert!(matches!(
            Container::from_bytes(&b),
            Err(CheckpointError::UnsupportedVersion(2))
        ));
        let mut b = bytes.clone();
        b[16] = 1;
        assert!(matches!(
            Container::from_bytes(&b),
            Err(CheckpointError::ReservedFlags(1))
        ));
        let mut b = bytes;
        b.push(0);
        assert!(matches!(Container::from_bytes(&b), Err(CheckpointError::Corrupt { .. })));
    }

    #[test]
    fn header_with_indivisible_heads_is_config_error() {
        let (mut cfg, w) = toy();
        let mut c = checkpoint_container(&cfg, w.tensors(), "").unwrap();
        cfg.n_heads = 5;
        c.config = Some(cfg);
        let bytes = c.to_bytes().unwrap();
        let err = checkpoint_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap_err();
        assert!(matches!(err, CheckpointError::Config(EncoderError::Config(_))), "{err}");
    }

    #[test]
    fn shape_inconsistency_names_tensor() {
        let (cfg, w) = toy();
        let mut c = checkpoint_container(&cfg, w.tensors(), "").unwrap();
        let idx = c.tensors.iter().position(|(n, _)| n == "proj.weight").unwrap();
        let t = c.tensors[idx].1.to::<f32>();
        let flat = t.clone().reshape(&[t.len()]).unwrap();
        c.tensors[idx].1 = StoredTensor::F32(flat);
        let err = checkpoint_from_container(&c).unwrap_err();
        match err {
            CheckpointError::Corrupt { tensor, .. } => assert_eq!(tensor, "proj.weight"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn checksum_tracks_values() {
        let (_, w) = toy();
        let a = weights_checksum(&w);
        let mut map = w.clone().into_tensors();
        map.get_mut("proj.bias").unwrap().data_mut()[0] = 1.0;
        assert_ne!(a, tensors_checksum(&map));
        assert_eq!(a, weights_checksum(&w));
    }
}
