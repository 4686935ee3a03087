//! Single-file tensor container, format version 1.
//!
//! All integers little-endian. Layout:
//!
//! ```text
//! magic        8 bytes   "XMODALCK"
//! version      u32       1
//! kind         u32       1 checkpoint, 2 parity fixture, 3 embedding cache,
//!                        4 probe model, 5 adapter bundle
//! flags        u32       0 (reserved)
//! config_len   u32       bytes of the encoder config block that follows
//! config       ...       fixed-width encoder config (see `encode_config`)
//! meta_len     u32
//! meta         ...       UTF-8 text (provenance for checkpoints, JSON otherwise)
//! n_tensors    u32
//! directory    n_tensors × { u32 name_len, name, u8 dtype, u8 rank,
//!                            u16 reserved = 0, rank × u32 dims,
//!                            u64 offset, u64 byte_len }
//! data         tensors, offsets relative to the start of this section
//! ```
//!
//! dtype 0 is f32, 1 is f64. The data section must be covered exactly: no
//! gaps, no overlaps, no trailing bytes.

use std::fmt;

use super::CheckpointError;
use crate::encoder::{ConvLayerSpec, ConvNorm, EncoderConfig, NormPlacement};
use crate::numkit::Tensor;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"XMODALCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    Checkpoint = 1,
    ParityFixture = 2,
    EmbeddingCache = 3,
    ProbeModel = 4,
    AdapterBundle = 5,
}

impl ContainerKind {
    fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            1 => Self::Checkpoint,
            2 => Self::ParityFixture,
            3 => Self::EmbeddingCache,
            4 => Self::ProbeModel,
            5 => Self::AdapterBundle,
            _ => return None,
        })
    }
}

impl fmt::Display for ContainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Checkpoint => "checkpoint",
            Self::ParityFixture => "parity fixture",
            Self::EmbeddingCache => "embedding cache",
            Self::ProbeModel => "probe model",
            Self::AdapterBundle => "adapter bundle",
        };
        f.write_str(s)
    }
}

/// A tensor as stored, keeping its on-disk precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
        }
    }

    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            Self::F32(t) => t.cast(),
            Self::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Self::F32(t.cast()),
            DType::F64 => Self::F64(t.cast()),
        }
    }

    fn write_data(&self, out: &mut Vec<u8>) {
        match self {
            Self::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            Self::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub config: Option<EncoderConfig>,
    pub meta: String,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Container {
    pub fn new(kind: ContainerKind) -> Self {
        Self {
            kind,
            config: None,
            meta: String::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), StoredTensor::from_tensor(t)));
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn expect_kind(&self, kind: ContainerKind) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind.to_string(),
                found: self.kind.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, self.kind as u32);
        put_u32(&mut out, 0);
        let config = self.config.as_ref().map(encode_config).unwrap_or_default();
        put_u32(&mut out, len_u32(config.len())?);
        out.extend_from_slice(&config);
        put_u32(&mut out, len_u32(self.meta.len())?);
        out.extend_from_slice(self.meta.as_bytes());
        put_u32(&mut out, len_u32(self.tensors.len())?);
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            put_u32(&mut out, len_u32(name.len())?);
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            let shape = t.shape();
            out.push(u8::try_from(shape.len()).map_err(|_| CheckpointError::corrupt(name, "rank above 255"))?);
            out.extend_from_slice(&0u16.to_le_bytes());
            for &d in shape {
                put_u32(&mut out, len_u32(d)?);
            }
            let bytes = (shape.iter().product::<usize>() * t.dtype().size()) as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&bytes.to_le_bytes());
            offset += bytes;
        }
        for (_, t) in &self.tensors {
            t.write_data(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let code = r.u32()?;
        let kind = ContainerKind::from_code(code).ok_or(CheckpointError::UnknownKind(code))?;
        let flags = r.u32()?;
        if flags != 0 {
            return Err(CheckpointError::ReservedFlags(flags));
        }
        let config_len = r.u32()? as usize;
        let config = if config_len == 0 {
            None
        } else {
            Some(decode_config(r.take(config_len)?)?)
        };
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| CheckpointError::corrupt("", "metadata is not UTF-8"))?;
        let n = r.u32()? as usize;

        struct Entry {
            name: String,
            dtype: DType,
            shape: Vec<usize>,
            offset: u64,
            len: u64,
        }
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::corrupt("", "tensor name is not UTF-8"))?;
            let dcode = r.u8()?;
            let dtype = DType::from_code(dcode)
                .ok_or_else(|| CheckpointError::corrupt(&name, format!("unknown dtype {dcode}")))?;
            let rank = r.u8()? as usize;
            if r.u16()? != 0 {
                return Err(CheckpointError::corrupt(&name, "reserved directory bits set"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let offset = r.u64()?;
            let len = r.u64()?;
            entries.push(Entry {
                name,
                dtype,
                shape,
                offset,
                len,
            });
        }
        let data = &bytes[r.pos..];

        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(entries.len());
        for e in &entries {
            let count: usize = e.shape.iter().product();
            if e.shape.is_empty() || count == 0 {
                return Err(CheckpointError::corrupt(&e.name, "empty shape"));
            }
            if (count * e.dtype.size()) as u64 != e.len {
                return Err(CheckpointError::corrupt(&e.name, "byte length disagrees with shape"));
            }
            match e.offset.checked_add(e.len) {
                Some(end) if end <= data.len() as u64 => spans.push((e.offset, end, &e.name)),
                _ => return Err(CheckpointError::corrupt(&e.name, "tensor data out of bounds")),
            }
        }
        spans.sort();
        let mut cursor = 0u64;
        for &(start, end, name) in &spans {
            if start < cursor {
                return Err(CheckpointError::corrupt(name, "overlapping tensor data"));
            }
            if start > cursor {
                return Err(CheckpointError::corrupt(name, "gap before tensor data"));
            }
            cursor = end;
        }
        if cursor != data.len() as u64 {
            return Err(CheckpointError::corrupt("", "trailing bytes after tensor data"));
        }

        let mut tensors = Vec::with_capacity(entries.len());
        for e in entries {
            let raw = &data[e.offset as usize..(e.offset + e.len) as usize];
            let t = match e.dtype {
                DType::F32 => StoredTensor::F32(
                    Tensor::new(
                        e.shape.clone(),
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                            .collect(),
                    )
                    .map_err(|err| CheckpointError::corrupt(&e.name, err.to_string()))?,
                ),
                DType::F64 => StoredTensor::F64(
                    Tensor::new(
                        e.shape.clone(),
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect(),
                    )
                    .map_err(|err| CheckpointError::corrupt(&e.name, err.to_string()))?,
                ),
            };
            tensors.push((e.name, t));
        }
        Ok(Self {
            kind,
            config,
            meta,
            tensors,
        })
    }
}

fn len_u32(n: usize) -> Result<u32, CheckpointError> {
    u32::try_from(n).map_err(|_| CheckpointError::corrupt("", format!("length {n} exceeds u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::corrupt("", "truncated header"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Fixed-width config block:
///
/// ```text
/// u32 n_conv, n_conv × (u32 out_channels, u32 kernel, u32 stride),
/// u32 conv_norm (0 group-norm-first-layer, 1 layer-norm-every-layer),
/// u32 conv_bias, u32 d_model, u32 n_layers, u32 n_heads, u32 ffn_dim,
/// u32 pos_conv_kernel, u32 pos_conv_groups, u32 pos_conv_trim_end,
/// u32 norm_placement (0 post, 1 pre), f64 layer_norm_eps
/// ```
pub fn encode_config(c: &EncoderConfig) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, c.conv_layers.len() as u32);
    for l in &c.conv_layers {
        put_u32(&mut out, l.out_channels as u32);
        put_u32(&mut out, l.kernel as u32);
        put_u32(&mut out, l.stride as u32);
    }
    put_u32(&mut out, matches!(c.conv_norm, ConvNorm::LayerNormEveryLayer) as u32);
    put_u32(&mut out, c.conv_bias as u32);
    for v in [
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.ffn_dim,
        c.pos_conv_kernel,
        c.pos_conv_groups,
    ] {
        put_u32(&mut out, v as u32);
    }
    put_u32(&mut out, c.pos_conv_trim_end as u32);
    put_u32(&mut out, matches!(c.norm_placement, NormPlacement::Pre) as u32);
    out.extend_from_slice(&c.layer_norm_eps.to_le_bytes());
    out
}

fn flag(v: u32, field: &str) -> Result<bool, CheckpointError> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(CheckpointError::corrupt("", format!("config field {field} = {v}"))),
    }
}

pub fn decode_config(block: &[u8]) -> Result<EncoderConfig, CheckpointError> {
    let mut r = Reader { bytes: block, pos: 0 };
    let n_conv = r.u32()? as usize;
    let expected = 4 + 12 * n_conv + 4 * 10 + 8;
    if block.len() != expected {
        return Err(CheckpointError::corrupt(
            "",
            format!("config block is {} bytes, expected {expected}", block.len()),
        ));
    }
    let mut conv_layers = Vec::with_capacity(n_conv);
    for _ in 0..n_conv {
        conv_layers.push(ConvLayerSpec::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize));
    }
    let conv_norm = if flag(r.u32()?, "conv_norm")? {
        ConvNorm::LayerNormEveryLayer
    } else {
        ConvNorm::GroupNormFirstLayer
    };
    let conv_bias = flag(r.u32()?, "conv_bias")?;
    let d_model = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let n_heads = r.u32()? as usize;
    let ffn_dim = r.u32()? as usize;
    let pos_conv_kernel = r.u32()? as usize;
    let pos_conv_groups = r.u32()? as usize;
    let pos_conv_trim_end = flag(r.u32()?, "pos_conv_trim_end")?;
    let norm_placement = if flag(r.u32()?, "norm_placement")? {
        NormPlacement::Pre
    } else {
        NormPlacement::Post
    };
    let layer_norm_eps = r.f64()?;
    Ok(EncoderConfig {
        conv_layers,
        conv_norm,
        conv_bias,
        d_model,
        n_layers,
        n_heads,
        ffn_dim,
        pos_conv_kernel,
        pos_conv_groups,
        pos_conv_trim_end,
        norm_placement,
        layer_norm_eps,
    })
}

/// `xxd`-style hex dump, 16 bytes per line.
pub fn hex_dump(bytes: &[u8]) -> String {
    let mut out = String::new();
    for (i, chunk) in bytes.chunks(16).enumerate() {
        out.push_str(&format!("{:08x}:", i * 16));
        for b in chunk {
            out.push_str(&format!(" {b:02x}"));
        }
        out.push('\n');
    }
    out
}
