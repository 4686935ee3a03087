use serde::{Deserialize, Serialize};

use super::EncoderError;

/// One strided conv stage of the feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayerSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvNorm {
    /// Per-channel normalization over time after the first conv only.
    GroupNormFirstLayer,
    /// Normalization over channels after every conv.
    LayerNormEveryLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    Post,
    Pre,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub conv_layers: Vec<ConvLayerSpec>,
    pub conv_norm: ConvNorm,
    pub conv_bias: bool,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    /// With an even positional-conv kernel, same-padding yields one extra
    /// frame; drop it from the end (`true`) or the start (`false`).
    pub pos_conv_trim_end: bool,
    pub norm_placement: NormPlacement,
    pub layer_norm_eps: f64,
}

pub const BASE_CONV_KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];
pub const BASE_CONV_STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];

/// The seven-stage extractor of the base-size public speech encoders.
pub fn base_conv_layers() -> Vec<ConvLayerSpec> {
    BASE_CONV_KERNELS
        .iter()
        .zip(BASE_CONV_STRIDES)
        .map(|(&k, s)| ConvLayerSpec::new(512, k, s))
        .collect()
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl EncoderConfig {
    /// Base-size architecture. Checkpoint headers override it.
    pub fn base() -> Self {
        Self {
            conv_layers: base_conv_layers(),
            conv_norm: ConvNorm::GroupNormFirstLayer,
            conv_bias: false,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            ffn_dim: 3072,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            pos_conv_trim_end: true,
            norm_placement: NormPlacement::Post,
            layer_norm_eps: 1e-5,
        }
    }

    /// Small encoder for tests and synthetic runs.
    pub fn toy(d_model: usize, n_layers: usize) -> Self {
        Self {
            conv_layers: vec![
                ConvLayerSpec::new(32, 10, 5),
                ConvLayerSpec::new(32, 3, 2),
                ConvLayerSpec::new(32, 3, 2),
            ],
            conv_norm: ConvNorm::GroupNormFirstLayer,
            conv_bias: false,
            d_model,
            n_layers,
            n_heads: 4,
            ffn_dim: 2 * d_model,
            pos_conv_kernel: 4,
            pos_conv_groups: 4,
            pos_conv_trim_end: true,
            norm_placement: NormPlacement::Post,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.conv_layers.is_empty() {
            return bad("conv_layers is empty".into());
        }
        if let Some((i, _)) = self
            .conv_layers
            .iter()
            .enumerate()
            .find(|(_, c)| c.out_channels == 0 || c.kernel == 0 || c.stride == 0)
        {
            return bad(format!("conv layer {i} has a zero dimension"));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("pos_conv_kernel", self.pos_conv_kernel),
            ("pos_conv_groups", self.pos_conv_groups),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_model.is_multiple_of(self.pos_conv_groups) {
            return bad(format!(
                "d_model {} not divisible by pos_conv_groups {}",
                self.d_model, self.pos_conv_groups
            ));
        }
        if !(self.layer_norm_eps.is_finite() && self.layer_norm_eps > 0.0) {
            return bad(format!("layer_norm_eps {} must be positive", self.layer_norm_eps));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn conv_channels(&self) -> usize {
        self.conv_layers.last().map_or(0, |c| c.out_channels)
    }

    pub fn frame_count(&self, input_length: usize) -> usize {
        frame_count(input_length, &self.conv_layers)
    }

    pub fn min_input_length(&self) -> usize {
        min_input_length(&self.conv_layers)
    }
}

/// Output frames after folding `L <- floor((L - K)/s) + 1` over every stage;
/// 0 when any stage underflows.
pub fn frame_count(input_length: usize, conv_layers: &[ConvLayerSpec]) -> usize {
    let mut len = input_length;
    for c in conv_layers {
        if len < c.kernel {
            return 0;
        }
        len = (len - c.kernel) / c.stride + 1;
    }
    len
}

/// Smallest input length producing one frame.
pub fn min_input_length(conv_layers: &[ConvLayerSpec]) -> usize {
    conv_layers
        .iter()
        .rev()
        .fold(1, |need, c| (need - 1) * c.stride + c.kernel)
}
