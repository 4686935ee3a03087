//! Frozen speech-style encoder: strided conv feature extractor, projection,
//! and a transformer stack with a tap after every block.

mod config;
mod forward;
mod taped;
mod weights;

use thiserror::Error;

use crate::numkit::TensorError;

pub use config::{
    base_conv_layers, frame_count, min_input_length, ConvLayerSpec, ConvNorm, EncoderConfig,
    NormPlacement, BASE_CONV_KERNELS, BASE_CONV_STRIDES,
};
pub use forward::{
    attention, attention_with_probs, encode, extract_features, transformer_block,
    AttentionWeights, HiddenStates,
};
pub use taped::{taped_attention, taped_block, TapedAdapters, TapedLora};
pub use weights::{required_tensors, EncoderWeights};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("input of {len} samples is too short; the conv stack needs at least {min_len}")]
    InputTooShort { len: usize, min_len: usize },
    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),
    #[error("weight `{name}` has shape {found:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unexpected weight tensor `{0}`")]
    UnexpectedWeight(String),
    #[error("tap {tap} outside layers 0..={max}")]
    InvalidTap { tap: usize, max: usize },
    #[error("adapter: {0}")]
    Adapter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet};

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::lora::{LoraAdapter, LoraSet, Projection};
    use crate::numkit::{self as nk, GradTape, Tensor};

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn wave(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn taps(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn base_spec_400_samples_gives_one_frame() {
        let mut cfg = EncoderConfig::base();
        for c in &mut cfg.conv_layers {
            c.out_channels = 8;
        }
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.ffn_dim = 8;
        cfg.n_layers = 1;
        cfg.pos_conv_kernel = 4;
        cfg.pos_conv_groups = 2;
        let w = EncoderWeights::<f64>::random(&cfg, 3).unwrap();
        let hs = encode(&wave(400, 1), &w, &cfg, &taps(&[0]), None).unwrap();
        assert_eq!(hs.get(0).unwrap().shape(), &[1, 8]);
        assert!(matches!(
            encode(&wave(399, 1), &w, &cfg, &taps(&[0]), None),
            Err(EncoderError::InputTooShort { len: 399, min_len: 400 })
        ));
    }

    #[test]
    fn empty_taps_skip_everything() {
        let cfg = EncoderConfig::toy(16, 2);
        let w = EncoderWeights::<f64>::random(&cfg, 3).unwrap();
        let hs = encode(&wave(300, 1), &w, &cfg, &BTreeSet::new(), None).unwrap();
        assert!(hs.is_empty());
    }

    #[test]
    fn tapped_layers_have_frame_count_rows() {
        let cfg = EncoderConfig::toy(16, 2);
        let w = EncoderWeights::<f64>::random(&cfg, 3).unwrap();
        for len in [cfg.min_input_length(), 300, 517] {
            let hs = encode(&wave(len, 2), &w, &cfg, &taps(&[0, 1, 2]), None).unwrap();
            for t in hs.layers().values() {
                assert_eq!(t.shape(), &[cfg.frame_count(len), 16]);
            }
            let scaled: Vec<f64> = wave(len, 2).iter().map(|v| v * 7.5).collect();
            let hs2 = encode(&scaled, &w, &cfg, &taps(&[0, 1, 2]), None).unwrap();
            for (a, b) in hs.layers().values().zip(hs2.layers().values()) {
                assert_eq!(a.shape(), b.shape());
            }
        }
        assert!(matches!(
            encode(&wave(300, 1), &w, &cfg, &taps(&[3]), None),
            Err(EncoderError::InvalidTap { tap: 3, max: 2 })
        ));
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = EncoderConfig::toy(16, 2);
        let w = EncoderWeights::<f32>::random(&cfg, 3).unwrap();
        let x: Vec<f32> = wave(400, 5).iter().map(|&v| v as f32).collect();
        let a = encode(&x, &w, &cfg, &taps(&[0, 2]), None).unwrap();
        let b = encode(&x, &w, &cfg, &taps(&[0, 2]), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pre_norm_and_layer_norm_conv_modes_run() {
        let mut cfg = EncoderConfig::toy(16, 2);
        cfg.norm_placement = NormPlacement::Pre;
        cfg.conv_norm = ConvNorm::LayerNormEveryLayer;
        cfg.conv_bias = true;
        cfg.pos_conv_kernel = 3;
        let w = EncoderWeights::<f64>::random(&cfg, 9).unwrap();
        let hs = encode(&wave(300, 4), &w, &cfg, &taps(&[2]), None).unwrap();
        assert!(hs.get(2).unwrap().is_finite());
    }

    fn attn_weights(rng: &mut ChaCha8Rng, d: usize) -> BTreeMap<String, Tensor<f64>> {
        let mut m = BTreeMap::new();
        for p in ["q", "k", "v", "o"] {
            m.insert(format!("{p}.w"), random_tensor(rng, &[d, d]));
            m.insert(format!("{p}.b"), random_tensor(rng, &[d]));
        }
        m
    }

    fn view(m: &BTreeMap<String, Tensor<f64>>) -> AttentionWeights<'_, f64> {
        let pair = |p: &str| (&m[&format!("{p}.w")], &m[&format!("{p}.b")]);
        AttentionWeights {
            q: pair("q"),
            k: pair("k"),
            v: pair("v"),
            o: pair("o"),
        }
    }

    #[test]
    fn single_frame_attention_is_output_of_value_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = attn_weights(&mut rng, 4);
        let w = view(&m);
        let x = random_tensor(&mut rng, &[1, 4]);
        let (y, probs) = attention_with_probs(&x, &w, 2, None, None).unwrap();
        for p in &probs {
            assert_eq!(p.data(), &[1.0]);
        }
        let v = nk::linear(&x, w.v.0, Some(w.v.1)).unwrap();
        let expect = nk::linear(&v, w.o.0, Some(w.o.1)).unwrap();
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-14);
    }

    #[test]
    fn zero_query_key_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut m = attn_weights(&mut rng, 4);
        for k in ["q.w", "q.b", "k.w", "k.b"] {
            let shape = m[k].shape().to_vec();
            m.insert(k.into(), Tensor::zeros(&shape));
        }
        let x = random_tensor(&mut rng, &[5, 4]);
        let (_, probs) = attention_with_probs(&x, &view(&m), 2, None, None).unwrap();
        for p in probs {
            assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn two_frame_attention_matches_hand_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 4;
        let heads = 2;
        let m = attn_weights(&mut rng, d);
        let x = random_tensor(&mut rng, &[2, d]);
        let (y, probs) = attention_with_probs(&x, &view(&m), heads, None, None).unwrap();

        // scalar loops, no shared kernels
        let lin = |w: &Tensor<f64>, b: &Tensor<f64>, row: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|o| b.data()[o] + (0..d).map(|i| w.data()[o * d + i] * row[i]).sum::<f64>())
                .collect()
        };
        let proj = |p: &str| -> Vec<Vec<f64>> {
            (0..2).map(|t| lin(&m[&format!("{p}.w")], &m[&format!("{p}.b")], x.row(t))).collect()
        };
        let (q, k, v) = (proj("q"), proj("k"), proj("v"));
        let dh = d / heads;
        let mut merged = vec![vec![0.0; d]; 2];
        for h in 0..heads {
            for t in 0..2 {
                let s: Vec<f64> = (0..2)
                    .map(|u| {
                        (0..dh).map(|j| q[t][h * dh + j] * k[u][h * dh + j]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let e0 = s[0].exp();
                let e1 = s[1].exp();
                let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
                let row_sum: f64 = probs[h].row(t).iter().sum();
                assert!((row_sum - 1.0).abs() < 1e-9);
                for j in 0..dh {
                    merged[t][h * dh + j] = p[0] * v[0][h * dh + j] + p[1] * v[1][h * dh + j];
                }
            }
        }
        for t in 0..2 {
            let expect = lin(&m["o.w"], &m["o.b"], &merged[t]);
            for j in 0..d {
                assert!((y.row(t)[j] - expect[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_b_adapters_change_nothing() {
        let cfg = EncoderConfig::toy(16, 2);
        let w = EncoderWeights::<f64>::random(&cfg, 3).unwrap();
        let mut set = LoraSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for l in 1..=2 {
            for p in [Projection::Query, Projection::Value] {
                set.insert(LoraAdapter::init(l, p, 16, 16, 4, 8.0, &mut rng).unwrap());
            }
        }
        let x = wave(400, 3);
        let plain = encode(&x, &w, &cfg, &taps(&[0, 1, 2]), None).unwrap();
        let adapted = encode(&x, &w, &cfg, &taps(&[0, 1, 2]), Some(&set)).unwrap();
        assert_eq!(plain, adapted);
    }

    #[test]
    fn taped_block_matches_plain_block() {
        for placement in [NormPlacement::Post, NormPlacement::Pre] {
            for trim_end in [true, false] {
                let mut cfg = EncoderConfig::toy(16, 2);
                cfg.norm_placement = placement;
                cfg.pos_conv_trim_end = trim_end;
                let w = EncoderWeights::<f64>::random(&cfg, 21).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(2);
                let h0 = random_tensor(&mut rng, &[6, 16]);
                let mut set = LoraSet::new();
                let mut ad = LoraAdapter::init(2, Projection::Value, 16, 16, 2, 4.0, &mut rng).unwrap();
                ad.b = random_tensor(&mut rng, &[16, 2]);
                set.insert(ad.clone());

                let h1 = transformer_block(&h0, 1, &w, &cfg, Some(&set)).unwrap();
                let h2 = transformer_block(&h1, 2, &w, &cfg, Some(&set)).unwrap();

                let mut tape = GradTape::new();
                let x = tape.constant(h0.clone());
                let mut map = TapedAdapters::new();
                map.insert(
                    (2, Projection::Value),
                    TapedLora {
                        a: tape.param(ad.a.clone()),
                        b: tape.param(ad.b.clone()),
                        scale: ad.scale(),
                    },
                );
                let t1 = taped_block(&mut tape, x, 1, &w, &cfg, &map).unwrap();
                let t2 = taped_block(&mut tape, t1, 2, &w, &cfg, &map).unwrap();
                assert!(tape.value(t1).max_abs_diff(&h1).unwrap() < 1e-12);
                assert!(tape.value(t2).max_abs_diff(&h2).unwrap() < 1e-12);
            }
        }
    }
}
