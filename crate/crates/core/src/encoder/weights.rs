use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ConvNorm, EncoderConfig};
use super::EncoderError;
use crate::numkit::Tensor;
use crate::scalar::Scalar;

/// Name and shape of every tensor an encoder config requires, in the
/// canonical order used for checkpoint directories.
pub fn required_tensors(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut c_in = 1;
    for (i, c) in config.conv_layers.iter().enumerate() {
        out.push((format!("conv.{i}.weight"), vec![c.out_channels, c_in, c.kernel]));
        if config.conv_bias {
            out.push((format!("conv.{i}.bias"), vec![c.out_channels]));
        }
        let normed = match config.conv_norm {
            ConvNorm::GroupNormFirstLayer => i == 0,
            ConvNorm::LayerNormEveryLayer => true,
        };
        if normed {
            out.push((format!("conv.{i}.norm.weight"), vec![c.out_channels]));
            out.push((format!("conv.{i}.norm.bias"), vec![c.out_channels]));
        }
        c_in = c.out_channels;
    }
    let d = config.d_model;
    out.push(("proj.norm.weight".into(), vec![c_in]));
    out.push(("proj.norm.bias".into(), vec![c_in]));
    out.push(("proj.weight".into(), vec![d, c_in]));
    out.push(("proj.bias".into(), vec![d]));
    out.push((
        "pos_conv.weight".into(),
        vec![d, d / config.pos_conv_groups, config.pos_conv_kernel],
    ));
    out.push(("pos_conv.bias".into(), vec![d]));
    out.push(("encoder.norm.weight".into(), vec![d]));
    out.push(("encoder.norm.bias".into(), vec![d]));
    for l in 1..=config.n_layers {
        for p in ["q", "k", "v", "o"] {
            out.push((format!("layers.{l}.attn.{p}.weight"), vec![d, d]));
            out.push((format!("layers.{l}.attn.{p}.bias"), vec![d]));
        }
        out.push((format!("layers.{l}.attn_norm.weight"), vec![d]));
        out.push((format!("layers.{l}.attn_norm.bias"), vec![d]));
        out.push((format!("layers.{l}.ffn.in.weight"), vec![config.ffn_dim, d]));
        out.push((format!("layers.{l}.ffn.in.bias"), vec![config.ffn_dim]));
        out.push((format!("layers.{l}.ffn.out.weight"), vec![d, config.ffn_dim]));
        out.push((format!("layers.{l}.ffn.out.bias"), vec![d]));
        out.push((format!("layers.{l}.ffn_norm.weight"), vec![d]));
        out.push((format!("layers.{l}.ffn_norm.bias"), vec![d]));
    }
    out
}

/// Complete, shape-checked tensor map for one [`EncoderConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> EncoderWeights<T> {
    /// Validates names and shapes against `config`; unknown names are rejected.
    pub fn new(config: &EncoderConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self, EncoderError> {
        config.validate()?;
        let required = required_tensors(config);
        for (name, shape) in &required {
            let t = tensors
                .get(name)
                .ok_or_else(|| EncoderError::MissingWeight(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(EncoderError::WeightShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if tensors.len() != required.len() {
            let extra = tensors
                .keys()
                .find(|k| !required.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(EncoderError::UnexpectedWeight(extra));
        }
        Ok(Self { tensors })
    }

    /// Seeded random initialization (fan-in scaled normals, unit norm gains).
    pub fn random(config: &EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in required_tensors(config) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with("norm.weight") {
                vec![T::one(); n]
            } else if name.ends_with(".bias") {
                vec![T::zero(); n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name.starts_with("conv.") { 2.0 } else { 1.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt())
                    .expect("positive std");
                (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
            };
            tensors.insert(name, Tensor::from_parts(shape, data));
        }
        Self::new(config, tensors)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, EncoderError> {
        self.tensors
            .get(name)
            .ok_or_else(|| EncoderError::MissingWeight(name.to_string()))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> EncoderWeights<U> {
        EncoderWeights {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}
