use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_container, write_container, CheckpointError, Container, ContainerKind, StoredTensor};
use crate::encoder::{encode, EncoderConfig, EncoderWeights};
use crate::numkit::Tensor;
use crate::scalar::Scalar;

/// Recorded input waveform and reference activations at a set of taps.
#[derive(Clone, Debug, PartialEq)]
pub struct ParityFixture {
    pub waveform: StoredTensor,
    pub references: BTreeMap<usize, StoredTensor>,
    pub tolerance: f64,
    pub producer: String,
}

#[derive(Serialize, Deserialize)]
struct FixtureMeta {
    producer: String,
    tolerance: f64,
    taps: Vec<usize>,
}

impl ParityFixture {
    pub fn taps(&self) -> BTreeSet<usize> {
        self.references.keys().copied().collect()
    }

    pub fn to_container(&self) -> Result<Container, CheckpointError> {
        let mut c = Container::new(ContainerKind::ParityFixture);
        c.meta = serde_json::to_string(&FixtureMeta {
            producer: self.producer.clone(),
            tolerance: self.tolerance,
            taps: self.references.keys().copied().collect(),
        })
        .map_err(|e| CheckpointError::Meta(e.to_string()))?;
        c.tensors.push(("input".into(), self.waveform.clone()));
        for (layer, t) in &self.references {
            c.tensors.push((format!("layer.{layer}"), t.clone()));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, CheckpointError> {
        c.expect_kind(ContainerKind::ParityFixture)?;
        let meta: FixtureMeta =
            serde_json::from_str(&c.meta).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let waveform = c
            .get("input")
            .ok_or_else(|| CheckpointError::MissingTensor("input".into()))?
            .clone();
        let mut references = BTreeMap::new();
        for &tap in &meta.taps {
            let name = format!("layer.{tap}");
            let t = c
                .get(&name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            references.insert(tap, t.clone());
        }
        if c.tensors.len() != meta.taps.len() + 1 {
            return Err(CheckpointError::corrupt("", "fixture holds tensors not listed in its taps"));
        }
        Ok(Self {
            waveform,
            references,
            tolerance: meta.tolerance,
            producer: meta.producer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_container(&self.to_container()?, path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_container(&read_container(path)?)
    }
}

/// Runs the encoder in precision `T` and records the taps as a fixture.
pub fn emit_fixture<T: Scalar>(
    config: &EncoderConfig,
    weights: &EncoderWeights<T>,
    waveform: &[T],
    taps: &BTreeSet<usize>,
    tolerance: f64,
    producer: &str,
) -> Result<ParityFixture, CheckpointError> {
    let hs = encode(waveform, weights, config, taps, None)?;
    let input = Tensor::new(vec![waveform.len()], waveform.to_vec())
        .map_err(|e| CheckpointError::FixtureIncompatible(e.to_string()))?;
    Ok(ParityFixture {
        waveform: StoredTensor::from_tensor(&input),
        references: hs
            .layers()
            .iter()
            .map(|(&l, t)| (l, StoredTensor::from_tensor(t)))
            .collect(),
        tolerance,
        producer: producer.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDeviation {
    pub layer: usize,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub producer: String,
    pub tolerance: f64,
    pub precision: String,
    pub layers: Vec<LayerDeviation>,
    pub passed: bool,
}

impl ParityReport {
    pub fn max_deviation(&self) -> f64 {
        self.layers.iter().map(|l| l.max_abs).fold(0.0, f64::max)
    }
}

/// Encodes the fixture input in precision `T` and compares every tap.
/// Exceeding the tolerance yields a failing report, not an error.
pub fn verify_parity<T: Scalar>(
    config: &EncoderConfig,
    weights: &EncoderWeights<T>,
    fixture: &ParityFixture,
) -> Result<ParityReport, CheckpointError> {
    let taps = fixture.taps();
    if let Some(&bad) = taps.iter().find(|&&t| t > config.n_layers) {
        return Err(CheckpointError::FixtureIncompatible(format!(
            "tap {bad} but the checkpoint has {} transformer layers",
            config.n_layers
        )));
    }
    let input: Tensor<T> = fixture.waveform.to();
    let frames = config.frame_count(input.len());
    if frames == 0 {
        return Err(CheckpointError::FixtureIncompatible(format!(
            "{}-sample input yields no frames",
            input.len()
        )));
    }
    for (layer, r) in &fixture.references {
        if r.shape() != [frames, config.d_model] {
            return Err(CheckpointError::FixtureIncompatible(format!(
                "layer {layer} reference is {:?}, checkpoint produces [{frames}, {}]",
                r.shape(),
                config.d_model
            )));
        }
    }
    let hs = encode(input.data(), weights, config, &taps, None)?;
    let mut layers = Vec::new();
    for (&layer, r) in &fixture.references {
        let ours = hs.get(layer).expect("tap computed");
        let reference: Tensor<f64> = r.to();
        let max_abs = ours
            .data()
            .iter()
            .zip(reference.data())
            .fold(0.0f64, |m, (&a, &b)| m.max((a.f64() - b).abs()));
        layers.push(LayerDeviation { layer, max_abs });
    }
    let passed = layers.iter().all(|l| l.max_abs <= fixture.tolerance);
    Ok(ParityReport {
        producer: fixture.producer.clone(),
        tolerance: fixture.tolerance,
        precision: super::dtype_name(T::DTYPE).to_string(),
        layers,
        passed,
    })
}
