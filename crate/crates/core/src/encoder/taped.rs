//! Transformer blocks recorded on a [`GradTape`]. Base weights enter as
//! constants; only adapter factors (and whatever the caller marks as a
//! parameter) receive gradients.

use std::collections::BTreeMap;

use super::config::{EncoderConfig, NormPlacement};
use super::forward::pos_conv_padding;
use super::weights::EncoderWeights;
use super::EncoderError;
use crate::lora::Projection;
use crate::numkit::{GradTape, Var};
use crate::scalar::Scalar;

/// Adapter factors living on a tape: `delta(x) = scale · (x·Aᵀ)·Bᵀ`.
#[derive(Clone, Copy, Debug)]
pub struct TapedLora<T> {
    pub a: Var,
    pub b: Var,
    pub scale: T,
}

pub type TapedAdapters<T> = BTreeMap<(usize, Projection), TapedLora<T>>;

fn constant<T: Scalar>(
    tape: &mut GradTape<T>,
    weights: &EncoderWeights<T>,
    name: &str,
) -> Result<Var, EncoderError> {
    Ok(tape.constant(weights.get(name)?.clone()))
}

fn taped_linear<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    weights: &EncoderWeights<T>,
    prefix: &str,
) -> Result<Var, EncoderError> {
    let w = constant(tape, weights, &format!("{prefix}.weight"))?;
    let b = constant(tape, weights, &format!("{prefix}.bias"))?;
    Ok(tape.linear(x, w, Some(b))?)
}

fn taped_norm<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    weights: &EncoderWeights<T>,
    prefix: &str,
    eps: T,
) -> Result<Var, EncoderError> {
    let g = constant(tape, weights, &format!("{prefix}.weight"))?;
    let b = constant(tape, weights, &format!("{prefix}.bias"))?;
    Ok(tape.layer_norm(x, g, b, eps)?)
}

fn with_adapter<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    y: Var,
    adapter: Option<&TapedLora<T>>,
) -> Result<Var, EncoderError> {
    let Some(ad) = adapter else { return Ok(y) };
    let xa = tape.matmul_nt(x, ad.a)?;
    let xab = tape.matmul_nt(xa, ad.b)?;
    let delta = tape.scale(xab, ad.scale);
    Ok(tape.add(y, delta)?)
}

/// Multi-head self-attention of `layer` on the tape.
pub fn taped_attention<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    layer: usize,
    weights: &EncoderWeights<T>,
    n_heads: usize,
    adapters: &TapedAdapters<T>,
) -> Result<Var, EncoderError> {
    let (_, d) = tape.value(x).dims2("attention")?;
    if n_heads == 0 || d % n_heads != 0 {
        return Err(EncoderError::Config(format!(
            "d_model {d} not divisible by n_heads {n_heads}"
        )));
    }
    let dh = d / n_heads;
    let base = format!("layers.{layer}.attn");
    let q = taped_linear(tape, x, weights, &format!("{base}.q"))?;
    let q = with_adapter(tape, x, q, adapters.get(&(layer, Projection::Query)))?;
    let k = taped_linear(tape, x, weights, &format!("{base}.k"))?;
    let v = taped_linear(tape, x, weights, &format!("{base}.v"))?;
    let v = with_adapter(tape, x, v, adapters.get(&(layer, Projection::Value)))?;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let p = tape.softmax(s);
        heads.push(tape.matmul(p, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    taped_linear(tape, merged, weights, &format!("{base}.o"))
}

fn taped_positional<T: Scalar>(
    tape: &mut GradTape<T>,
    h: Var,
    weights: &EncoderWeights<T>,
    config: &EncoderConfig,
) -> Result<Var, EncoderError> {
    let (frames, _) = tape.value(h).dims2("positional_embedding")?;
    let (pl, pr, skip) = pos_conv_padding(config);
    let xt = tape.transpose(h)?;
    let w = constant(tape, weights, "pos_conv.weight")?;
    let b = constant(tape, weights, "pos_conv.bias")?;
    let mut y = tape.conv1d(xt, w, Some(b), 1, config.pos_conv_groups, pl, pr)?;
    let (_, out_len) = tape.value(y).dims2("positional_embedding")?;
    if out_len != frames {
        y = if skip == 0 {
            tape.trim_cols(y, frames)?
        } else {
            tape.slice_cols(y, skip, frames)?
        };
    }
    let y = tape.gelu(y);
    Ok(tape.transpose(y)?)
}

fn taped_ffn<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    weights: &EncoderWeights<T>,
    layer: usize,
) -> Result<Var, EncoderError> {
    let hid = taped_linear(tape, x, weights, &format!("layers.{layer}.ffn.in"))?;
    let hid = tape.gelu(hid);
    taped_linear(tape, hid, weights, &format!("layers.{layer}.ffn.out"))
}

/// Tape counterpart of [`super::transformer_block`]; numerically identical
/// forward values.
pub fn taped_block<T: Scalar>(
    tape: &mut GradTape<T>,
    h: Var,
    layer: usize,
    weights: &EncoderWeights<T>,
    config: &EncoderConfig,
    adapters: &TapedAdapters<T>,
) -> Result<Var, EncoderError> {
    let eps = T::of(config.layer_norm_eps);
    let mut h = h;
    if layer == 1 {
        let pos = taped_positional(tape, h, weights, config)?;
        h = tape.add(h, pos)?;
        if config.norm_placement == NormPlacement::Post {
            h = taped_norm(tape, h, weights, "encoder.norm", eps)?;
        }
    }
    let attn_norm = format!("layers.{layer}.attn_norm");
    let ffn_norm = format!("layers.{layer}.ffn_norm");
    match config.norm_placement {
        NormPlacement::Post => {
            let a = taped_attention(tape, h, layer, weights, config.n_heads, adapters)?;
            let r = tape.add(h, a)?;
            h = taped_norm(tape, r, weights, &attn_norm, eps)?;
            let f = taped_ffn(tape, h, weights, layer)?;
            let r = tape.add(h, f)?;
            h = taped_norm(tape, r, weights, &ffn_norm, eps)?;
        }
        NormPlacement::Pre => {
            let n = taped_norm(tape, h, weights, &attn_norm, eps)?;
            let a = taped_attention(tape, n, layer, weights, config.n_heads, adapters)?;
            h = tape.add(h, a)?;
            let n = taped_norm(tape, h, weights, &ffn_norm, eps)?;
            let f = taped_ffn(tape, n, weights, layer)?;
            h = tape.add(h, f)?;
            if layer == config.n_layers {
                h = taped_norm(tape, h, weights, "encoder.norm", eps)?;
            }
        }
    }
    Ok(h)
}
