use std::collections::{BTreeMap, BTreeSet};

use super::config::{ConvNorm, EncoderConfig, NormPlacement};
use super::weights::EncoderWeights;
use super::EncoderError;
use crate::lora::{LoraAdapter, LoraSet, Projection};
use crate::numkit::{self as nk, Tensor};
use crate::scalar::Scalar;

/// Per-layer hidden states, each `frames × d_model`. Layer 0 is the
/// projected conv output; layers `1..=L` are transformer block outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates<T> {
    layers: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> HiddenStates<T> {
    pub fn empty() -> Self {
        Self {
            layers: BTreeMap::new(),
        }
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor<T>> {
        self.layers.get(&layer)
    }

    pub fn layers(&self) -> &BTreeMap<usize, Tensor<T>> {
        &self.layers
    }

    pub fn into_layers(self) -> BTreeMap<usize, Tensor<T>> {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Borrowed weights of one self-attention module.
pub struct AttentionWeights<'a, T> {
    pub q: (&'a Tensor<T>, &'a Tensor<T>),
    pub k: (&'a Tensor<T>, &'a Tensor<T>),
    pub v: (&'a Tensor<T>, &'a Tensor<T>),
    pub o: (&'a Tensor<T>, &'a Tensor<T>),
}

impl<'a, T: Scalar> AttentionWeights<'a, T> {
    pub fn for_layer(weights: &'a EncoderWeights<T>, layer: usize) -> Result<Self, EncoderError> {
        let pair = |p: &str| -> Result<_, EncoderError> {
            Ok((
                weights.get(&format!("layers.{layer}.attn.{p}.weight"))?,
                weights.get(&format!("layers.{layer}.attn.{p}.bias"))?,
            ))
        };
        Ok(Self {
            q: pair("q")?,
            k: pair("k")?,
            v: pair("v")?,
            o: pair("o")?,
        })
    }
}

fn project<T: Scalar>(
    x: &Tensor<T>,
    (w, b): (&Tensor<T>, &Tensor<T>),
    adapter: Option<&LoraAdapter<T>>,
) -> Result<Tensor<T>, EncoderError> {
    let y = nk::linear(x, w, Some(b))?;
    match adapter {
        None => Ok(y),
        Some(a) => Ok(nk::add(&y, &a.delta(x)?)?),
    }
}

/// Bidirectional multi-head self-attention. Returns the output and the
/// per-head attention probability matrices (`T×T` each).
pub fn attention_with_probs<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<'_, T>,
    n_heads: usize,
    q_adapter: Option<&LoraAdapter<T>>,
    v_adapter: Option<&LoraAdapter<T>>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>), EncoderError> {
    let (frames, d) = x.dims2("attention")?;
    if n_heads == 0 || d % n_heads != 0 {
        return Err(EncoderError::Config(format!(
            "d_model {d} not divisible by n_heads {n_heads}"
        )));
    }
    let dh = d / n_heads;
    let q = project(x, w.q, q_adapter)?;
    let k = project(x, w.k, None)?;
    let v = project(x, w.v, v_adapter)?;
    let scale = T::one() / T::of(dh as f64).sqrt();

    let cols = |t: &Tensor<T>, h: usize| -> Tensor<T> {
        let data = (0..frames)
            .flat_map(|i| t.row(i)[h * dh..(h + 1) * dh].iter().copied())
            .collect();
        Tensor::from_parts(vec![frames, dh], data)
    };

    let mut merged = vec![T::zero(); frames * d];
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = (cols(&q, h), cols(&k, h), cols(&v, h));
        let scores = nk::matmul_nt(&qh, &kh)?.map(|s| s * scale);
        let p = nk::softmax(&scores);
        let out = nk::matmul(&p, &vh)?;
        for i in 0..frames {
            merged[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(out.row(i));
        }
        probs.push(p);
    }
    let merged = Tensor::from_parts(vec![frames, d], merged);
    Ok((nk::linear(&merged, w.o.0, Some(w.o.1))?, probs))
}

pub fn attention<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<'_, T>,
    n_heads: usize,
) -> Result<Tensor<T>, EncoderError> {
    Ok(attention_with_probs(x, w, n_heads, None, None)?.0)
}

/// Conv feature extractor followed by the projection to `d_model`:
/// the layer-0 hidden state.
pub fn extract_features<T: Scalar>(
    waveform: &[T],
    weights: &EncoderWeights<T>,
    config: &EncoderConfig,
) -> Result<Tensor<T>, EncoderError> {
    if config.frame_count(waveform.len()) == 0 {
        return Err(EncoderError::InputTooShort {
            len: waveform.len(),
            min_len: config.min_input_length(),
        });
    }
    let eps = T::of(config.layer_norm_eps);
    let mut x = Tensor::from_parts(vec![1, waveform.len()], waveform.to_vec());
    for (i, c) in config.conv_layers.iter().enumerate() {
        let bias = if config.conv_bias {
            Some(weights.get(&format!("conv.{i}.bias"))?)
        } else {
            None
        };
        x = nk::conv1d_ext(&x, weights.get(&format!("conv.{i}.weight"))?, bias, c.stride, 1, 0, 0)?;
        let gain = format!("conv.{i}.norm.weight");
        let shift = format!("conv.{i}.norm.bias");
        x = match config.conv_norm {
            ConvNorm::GroupNormFirstLayer if i == 0 => {
                nk::channel_norm(&x, weights.get(&gain)?, weights.get(&shift)?, eps)?
            }
            ConvNorm::GroupNormFirstLayer => x,
            ConvNorm::LayerNormEveryLayer => {
                let t = nk::layer_norm(&nk::transpose(&x)?, weights.get(&gain)?, weights.get(&shift)?, eps)?;
                nk::transpose(&t)?
            }
        };
        x = nk::gelu(&x);
    }
    let feats = nk::transpose(&x)?;
    let normed = nk::layer_norm(
        &feats,
        weights.get("proj.norm.weight")?,
        weights.get("proj.norm.bias")?,
        eps,
    )?;
    Ok(nk::linear(
        &normed,
        weights.get("proj.weight")?,
        Some(weights.get("proj.bias")?),
    )?)
}

/// `same` padding for the positional conv: `K/2` zeros each side. Returns
/// the pads and the offset of the first kept output frame.
pub(crate) fn pos_conv_padding(config: &EncoderConfig) -> (usize, usize, usize) {
    let pad = config.pos_conv_kernel / 2;
    let skip = usize::from(config.pos_conv_kernel.is_multiple_of(2) && !config.pos_conv_trim_end);
    (pad, pad, skip)
}

fn positional_embedding<T: Scalar>(
    h: &Tensor<T>,
    weights: &EncoderWeights<T>,
    config: &EncoderConfig,
) -> Result<Tensor<T>, EncoderError> {
    let (frames, d) = h.dims2("positional_embedding")?;
    let (pl, pr, skip) = pos_conv_padding(config);
    let xt = nk::transpose(h)?;
    let y = nk::conv1d_ext(
        &xt,
        weights.get("pos_conv.weight")?,
        Some(weights.get("pos_conv.bias")?),
        1,
        config.pos_conv_groups,
        pl,
        pr,
    )?;
    let (_, out_len) = y.dims2("positional_embedding")?;
    let y = if out_len != frames {
        let data = y
            .data()
            .chunks(out_len)
            .flat_map(|r| r[skip..skip + frames].iter().copied())
            .collect();
        Tensor::from_parts(vec![d, frames], data)
    } else {
        y
    };
    Ok(nk::transpose(&nk::gelu(&y))?)
}

fn ffn<T: Scalar>(
    x: &Tensor<T>,
    weights: &EncoderWeights<T>,
    layer: usize,
) -> Result<Tensor<T>, EncoderError> {
    let hid = nk::linear(
        x,
        weights.get(&format!("layers.{layer}.ffn.in.weight"))?,
        Some(weights.get(&format!("layers.{layer}.ffn.in.bias"))?),
    )?;
    Ok(nk::linear(
        &nk::gelu(&hid),
        weights.get(&format!("layers.{layer}.ffn.out.weight"))?,
        Some(weights.get(&format!("layers.{layer}.ffn.out.bias"))?),
    )?)
}

fn norm<T: Scalar>(
    x: &Tensor<T>,
    weights: &EncoderWeights<T>,
    prefix: &str,
    eps: T,
) -> Result<Tensor<T>, EncoderError> {
    Ok(nk::layer_norm(
        x,
        weights.get(&format!("{prefix}.weight"))?,
        weights.get(&format!("{prefix}.bias"))?,
        eps,
    )?)
}

/// One transformer block (`layer` is 1-based). Block 1 also applies the
/// positional conv embedding.
pub fn transformer_block<T: Scalar>(
    h: &Tensor<T>,
    layer: usize,
    weights: &EncoderWeights<T>,
    config: &EncoderConfig,
    adapters: Option<&LoraSet<T>>,
) -> Result<Tensor<T>, EncoderError> {
    let eps = T::of(config.layer_norm_eps);
    let mut h = h.clone();
    if layer == 1 {
        h = nk::add(&h, &positional_embedding(&h, weights, config)?)?;
        if config.norm_placement == NormPlacement::Post {
            h = norm(&h, weights, "encoder.norm", eps)?;
        }
    }
    let aw = AttentionWeights::for_layer(weights, layer)?;
    let qa = adapters.and_then(|s| s.get(layer, Projection::Query));
    let va = adapters.and_then(|s| s.get(layer, Projection::Value));
    let attn_norm = format!("layers.{layer}.attn_norm");
    let ffn_norm = format!("layers.{layer}.ffn_norm");
    match config.norm_placement {
        NormPlacement::Post => {
            let (a, _) = attention_with_probs(&h, &aw, config.n_heads, qa, va)?;
            h = norm(&nk::add(&h, &a)?, weights, &attn_norm, eps)?;
            let f = ffn(&h, weights, layer)?;
            h = norm(&nk::add(&h, &f)?, weights, &ffn_norm, eps)?;
        }
        NormPlacement::Pre => {
            let n = norm(&h, weights, &attn_norm, eps)?;
            let (a, _) = attention_with_probs(&n, &aw, config.n_heads, qa, va)?;
            h = nk::add(&h, &a)?;
            let n = norm(&h, weights, &ffn_norm, eps)?;
            h = nk::add(&h, &ffn(&n, weights, layer)?)?;
            if layer == config.n_layers {
                h = norm(&h, weights, "encoder.norm", eps)?;
            }
        }
    }
    Ok(h)
}

/// Runs the encoder on one mono waveform and returns the requested taps.
/// Blocks above the highest tap are not computed.
pub fn encode<T: Scalar>(
    waveform: &[T],
    weights: &EncoderWeights<T>,
    config: &EncoderConfig,
    taps: &BTreeSet<usize>,
    adapters: Option<&LoraSet<T>>,
) -> Result<HiddenStates<T>, EncoderError> {
    if let Some(&bad) = taps.iter().find(|&&t| t > config.n_layers) {
        return Err(EncoderError::InvalidTap {
            tap: bad,
            max: config.n_layers,
        });
    }
    if let Some(set) = adapters {
        set.check_against(config)?;
    }
    if config.frame_count(waveform.len()) == 0 {
        return Err(EncoderError::InputTooShort {
            len: waveform.len(),
            min_len: config.min_input_length(),
        });
    }
    let Some(&top) = taps.iter().next_back() else {
        return Ok(HiddenStates::empty());
    };
    let mut layers = BTreeMap::new();
    let mut h = extract_features(waveform, weights, config)?;
    if taps.contains(&0) {
        layers.insert(0, h.clone());
    }
    for layer in 1..=top {
        h = transformer_block(&h, layer, weights, config, adapters)?;
        if taps.contains(&layer) {
            layers.insert(layer, h.clone());
        }
    }
    Ok(HiddenStates { layers })
}
