//! Bit-exact checkpoint container for all weight types.
//!
//! Layout (all integers little-endian regardless of host):
//!
//! ```text
//! offset 0   magic "MVLM"
//! offset 4   version: u32 (currently 1)
//! offset 8   config_len: u32
//! offset 12  config blob: UTF-8 "key=value\n" lines
//! next       tensor_count: u32
//! next       per tensor:
//!              name_len: u32, name bytes (UTF-8)
//!              dtype: u8 (0 = f32, 1 = q8, 2 = q4)
//!              rank: u8
//!              dims: rank x u32 (logical dims)
//!              byte_offset: u64 (absolute, 32-byte aligned)
//! payload    blobs in table order, zero padding between:
//!              f32 -> prod(dims) f32 values
//!              q8  -> group scales (f32 each) then one code byte per element
//!              q4  -> group scales then packed nibbles in the split-group
//!                     layout of [`crate::quant`]
//! ```
//!
//! Blob lengths are derived from dtype and dims (quantized tensors pad
//! columns to the 32-element group boundary), so the table carries no
//! explicit length. Offsets must be strictly increasing and non-overlapping;
//! a load never reads past the extent derived for each blob.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::decoder::{BlockWeights, DecoderConfig, DecoderWeights};
use crate::error::{Error, Result};
use crate::nn::{
    AttentionParams, ConvKind, ConvParams, LayerNormParams, Linear, RmsNormParams, SwigluParams,
};
use crate::projector::{DwPwWeights, ProjectorSpec, Stage, StageWeights, DW_KERNEL};
use crate::quant::{QuantMode, QuantizedTensor, GROUP_SIZE};
use crate::tensor::Tensor;
use crate::vision::{FeatureLayer, VisionBlockWeights, VisionConfig, VisionWeights};
use crate::weights::{ModelConfig, ModelWeights};

pub const MAGIC: [u8; 4] = *b"MVLM";
pub const VERSION: u32 = 1;
const ALIGN: u64 = 32;

#[derive(Debug, Clone)]
enum TensorPayload {
    Dense(Tensor),
    Quant(QuantizedTensor),
}

impl TensorPayload {
    fn dtype(&self) -> u8 {
        match self {
            TensorPayload::Dense(_) => 0,
            TensorPayload::Quant(q) => match q.mode() {
                QuantMode::Q8 => 1,
                QuantMode::Q4 => 2,
            },
        }
    }

    fn dims(&self) -> Vec<u32> {
        match self {
            TensorPayload::Dense(t) => t.shape().iter().map(|&d| d as u32).collect(),
            TensorPayload::Quant(q) => q.logical_shape().iter().map(|&d| d as u32).collect(),
        }
    }

    fn blob_len(&self) -> u64 {
        match self {
            TensorPayload::Dense(t) => 4 * t.len() as u64,
            TensorPayload::Quant(q) => (4 * q.scales().len() + q.codes().len()) as u64,
        }
    }

    fn write_blob(&self, out: &mut Vec<u8>) {
        match self {
            TensorPayload::Dense(t) => {
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            TensorPayload::Quant(q) => {
                for &s in q.scales() {
                    out.extend_from_slice(&s.to_le_bytes());
                }
                out.extend_from_slice(q.codes());
            }
        }
    }
}

fn blob_len_for(dtype: u8, dims: &[u32]) -> Result<u64> {
    match dtype {
        0 => Ok(4 * dims.iter().map(|&d| d as u64).product::<u64>()),
        1 | 2 => {
            if dims.len() != 2 {
                return Err(Error::MalformedConfig {
                    reason: format!("quantized tensor must be rank 2, got rank {}", dims.len()),
                });
            }
            let rows = dims[0] as u64;
            let cols = dims[1] as u64;
            let padded = cols.div_ceil(GROUP_SIZE as u64) * GROUP_SIZE as u64;
            let scales = 4 * (rows * padded / GROUP_SIZE as u64);
            let codes = if dtype == 1 {
                rows * padded
            } else {
                rows * padded / 2
            };
            Ok(scales + codes)
        }
        other => Err(Error::MalformedConfig {
            reason: format!("unknown dtype tag {other}"),
        }),
    }
}

fn linear_payload(l: &Linear) -> TensorPayload {
    match l {
        Linear::Dense(t) => TensorPayload::Dense(t.clone()),
        Linear::Quant(q) => TensorPayload::Quant(q.clone()),
    }
}

/// Enumerate every tensor with its canonical name, in serialization order.
fn collect_tensors(w: &ModelWeights) -> Vec<(String, TensorPayload)> {
    let mut out: Vec<(String, TensorPayload)> = Vec::new();
    let dense = |t: &Tensor| TensorPayload::Dense(t.clone());

    out.push((
        "decoder.token_embedding".into(),
        linear_payload(&w.decoder.token_embedding),
    ));
    for (i, b) in w.decoder.blocks.iter().enumerate() {
        let p = |suffix: &str| format!("decoder.block{i}.{suffix}");
        out.push((p("attn.wq"), linear_payload(&b.attn.wq)));
        out.push((p("attn.wk"), linear_payload(&b.attn.wk)));
        out.push((p("attn.wv"), linear_payload(&b.attn.wv)));
        out.push((p("attn.wo"), linear_payload(&b.attn.wo)));
        out.push((p("ffn.w_gate"), linear_payload(&b.ffn.w_gate)));
        out.push((p("ffn.w_up"), linear_payload(&b.ffn.w_up)));
        out.push((p("ffn.w_down"), linear_payload(&b.ffn.w_down)));
        out.push((p("norm1.gain"), dense(&b.norm1.gain)));
        out.push((p("norm2.gain"), dense(&b.norm2.gain)));
    }
    out.push((
        "decoder.final_norm.gain".into(),
        dense(&w.decoder.final_norm.gain),
    ));
    out.push(("decoder.lm_head".into(), linear_payload(&w.decoder.lm_head)));

    if let Some(v) = &w.vision {
        out.push(("vision.patch_projection".into(), dense(&v.patch_projection)));
        if let Some(cls) = &v.class_token {
            out.push(("vision.class_token".into(), dense(cls)));
        }
        out.push((
            "vision.position_embedding".into(),
            dense(&v.position_embedding),
        ));
        for (i, l) in v.layers.iter().enumerate() {
            let p = |suffix: &str| format!("vision.layer{i}.{suffix}");
            out.push((p("ln1.gain"), dense(&l.ln1.gain)));
            out.push((p("ln1.bias"), dense(&l.ln1.bias)));
            out.push((p("attn.wq"), linear_payload(&l.attn.wq)));
            out.push((p("attn.wk"), linear_payload(&l.attn.wk)));
            out.push((p("attn.wv"), linear_payload(&l.attn.wv)));
            out.push((p("attn.wo"), linear_payload(&l.attn.wo)));
            out.push((p("ln2.gain"), dense(&l.ln2.gain)));
            out.push((p("ln2.bias"), dense(&l.ln2.bias)));
            out.push((p("mlp_in"), dense(&l.mlp_in)));
            out.push((p("mlp_out"), dense(&l.mlp_out)));
        }
    }

    if let Some(proj) = &w.projector {
        for (i, s) in proj.stages.iter().enumerate() {
            let p = |suffix: &str| format!("projector.stage{i}.{suffix}");
            match s {
                StageWeights::Pointwise(c) => {
                    out.push((p("pw.weight"), dense(&c.weight)));
                    if let Some(b) = &c.bias {
                        out.push((p("pw.bias"), dense(b)));
                    }
                }
                StageWeights::DwPw(d) => {
                    out.push((p("dw.weight"), dense(&d.dw.weight)));
                    if let Some(b) = &d.dw.bias {
                        out.push((p("dw.bias"), dense(b)));
                    }
                    out.push((p("ln1.gain"), dense(&d.ln1.gain)));
                    out.push((p("ln1.bias"), dense(&d.ln1.bias)));
                    out.push((p("pw.weight"), dense(&d.pw.weight)));
                    if let Some(b) = &d.pw.bias {
                        out.push((p("pw.bias"), dense(b)));
                    }
                    out.push((p("ln2.gain"), dense(&d.ln2.gain)));
                    out.push((p("ln2.bias"), dense(&d.ln2.bias)));
                }
            }
        }
    }
    out
}

fn config_blob(w: &ModelWeights) -> String {
    let mut s = String::new();
    let d = &w.decoder.config;
    s.push_str(&format!("decoder.num_blocks={}\n", d.num_blocks));
    s.push_str(&format!("decoder.dim={}\n", d.dim));
    s.push_str(&format!("decoder.num_heads={}\n", d.num_heads));
    s.push_str(&format!("decoder.context_length={}\n", d.context_length));
    s.push_str(&format!("decoder.vocab_size={}\n", d.vocab_size));
    s.push_str(&format!("quant.mode={}\n", w.quant_mode_name()));
    match &w.vision {
        None => s.push_str("vision.present=0\n"),
        Some(v) => {
            let c = &v.config;
            s.push_str("vision.present=1\n");
            s.push_str(&format!("vision.image_size={}\n", c.image_size));
            s.push_str(&format!("vision.patch_size={}\n", c.patch_size));
            s.push_str(&format!("vision.embed_dim={}\n", c.embed_dim));
            s.push_str(&format!("vision.num_layers={}\n", c.num_layers));
            s.push_str(&format!("vision.num_heads={}\n", c.num_heads));
            s.push_str(&format!(
                "vision.use_class_token={}\n",
                u8::from(c.use_class_token)
            ));
            s.push_str(&format!("vision.channels={}\n", c.channels));
            s.push_str(&format!(
                "vision.feature_layer={}\n",
                match c.feature_layer {
                    FeatureLayer::Final => "final",
                    FeatureLayer::Penultimate => "penultimate",
                }
            ));
        }
    }
    match &w.projector {
        None => s.push_str("projector.present=0\n"),
        Some(p) => {
            s.push_str("projector.present=1\n");
            s.push_str(&format!("projector.input_dim={}\n", p.spec.input_dim));
            s.push_str(&format!("projector.output_dim={}\n", p.spec.output_dim));
            s.push_str(&format!("projector.spec={}\n", p.spec.to_grammar()));
        }
    }
    s
}

/// Serialize the full weight set to `path`, bit-exactly.
pub fn save(w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let tensors = collect_tensors(w);
    let config = config_blob(w);

    // Table size pre-pass to place the payload.
    let mut table_len = 4u64; // tensor_count
    for (name, payload) in &tensors {
        table_len += 4 + name.len() as u64 + 1 + 1 + 4 * payload.dims().len() as u64 + 8;
    }
    let header_end = 12 + config.len() as u64 + table_len;

    let mut offsets = Vec::with_capacity(tensors.len());
    let mut cursor = header_end.next_multiple_of(ALIGN);
    for (_, payload) in &tensors {
        offsets.push(cursor);
        cursor = (cursor + payload.blob_len()).next_multiple_of(ALIGN);
    }

    let mut buf = Vec::with_capacity(cursor as usize);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for ((name, payload), &offset) in tensors.iter().zip(&offsets) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(payload.dtype());
        let dims = payload.dims();
        buf.push(dims.len() as u8);
        for d in &dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
    }
    debug_assert_eq!(buf.len() as u64, header_end);
    for ((_, payload), &offset) in tensors.iter().zip(&offsets) {
        buf.resize(offset as usize, 0);
        payload.write_blob(&mut buf);
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: u64,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated {
            offset: self.pos,
            needed: n,
            available: self.data.len() as u64,
        })?;
        if end > self.data.len() as u64 {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available: self.data.len() as u64,
            });
        }
        let slice = &self.data[self.pos as usize..end as usize];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

struct ConfigMap(HashMap<String, String>);

impl ConfigMap {
    fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::MalformedConfig {
                reason: format!("line {line:?} has no '='"),
            })?;
            map.insert(k.to_string(), v.to_string());
        }
        Ok(Self(map))
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::MalformedConfig {
                reason: format!("missing key {key:?}"),
            })
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.get(key)?.parse().map_err(|_| Error::MalformedConfig {
            reason: format!("key {key:?} is not an integer"),
        })
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::MalformedConfig {
                reason: format!("key {key:?} must be 0 or 1, got {other:?}"),
            }),
        }
    }
}

fn parse_model_config(map: &ConfigMap) -> Result<ModelConfig> {
    let decoder = DecoderConfig {
        num_blocks: map.usize("decoder.num_blocks")?,
        dim: map.usize("decoder.dim")?,
        num_heads: map.usize("decoder.num_heads")?,
        context_length: map.usize("decoder.context_length")?,
        vocab_size: map.usize("decoder.vocab_size")?,
    };
    let vision = if map.bool("vision.present")? {
        Some(VisionConfig {
            image_size: map.usize("vision.image_size")?,
            patch_size: map.usize("vision.patch_size")?,
            embed_dim: map.usize("vision.embed_dim")?,
            num_layers: map.usize("vision.num_layers")?,
            num_heads: map.usize("vision.num_heads")?,
            use_class_token: map.bool("vision.use_class_token")?,
            channels: map.usize("vision.channels")?,
            feature_layer: match map.get("vision.feature_layer")? {
                "final" => FeatureLayer::Final,
                "penultimate" => FeatureLayer::Penultimate,
                other => {
                    return Err(Error::MalformedConfig {
                        reason: format!("unknown feature layer {other:?}"),
                    })
                }
            },
        })
    } else {
        None
    };
    let projector = if map.bool("projector.present")? {
        Some(ProjectorSpec::parse(
            map.get("projector.spec")?,
            map.usize("projector.input_dim")?,
            map.usize("projector.output_dim")?,
        )?)
    } else {
        None
    };
    Ok(ModelConfig {
        decoder,
        vision,
        projector,
    })
}

struct TensorMap(HashMap<String, TensorPayload>);

impl TensorMap {
    fn remove(&mut self, name: &str) -> Result<TensorPayload> {
        self.0.remove(name).ok_or_else(|| Error::MissingTensor {
            name: name.to_string(),
        })
    }

    fn dense(&mut self, name: &str) -> Result<Tensor> {
        match self.remove(name)? {
            TensorPayload::Dense(t) => Ok(t),
            TensorPayload::Quant(_) => Err(Error::MalformedConfig {
                reason: format!("tensor {name:?} must be f32"),
            }),
        }
    }

    fn linear(&mut self, name: &str) -> Result<Linear> {
        Ok(match self.remove(name)? {
            TensorPayload::Dense(t) => Linear::Dense(t),
            TensorPayload::Quant(q) => Linear::Quant(q),
        })
    }
}

fn rebuild_weights(config: &ModelConfig, tensors: &mut TensorMap) -> Result<ModelWeights> {
    let d = &config.decoder;
    let token_embedding = tensors.linear("decoder.token_embedding")?;
    let mut blocks = Vec::with_capacity(d.num_blocks);
    for i in 0..d.num_blocks {
        let p = |suffix: &str| format!("decoder.block{i}.{suffix}");
        blocks.push(BlockWeights {
            attn: AttentionParams {
                wq: tensors.linear(&p("attn.wq"))?,
                wk: tensors.linear(&p("attn.wk"))?,
                wv: tensors.linear(&p("attn.wv"))?,
                wo: tensors.linear(&p("attn.wo"))?,
                num_heads: d.num_heads,
            },
            ffn: SwigluParams {
                w_gate: tensors.linear(&p("ffn.w_gate"))?,
                w_up: tensors.linear(&p("ffn.w_up"))?,
                w_down: tensors.linear(&p("ffn.w_down"))?,
            },
            norm1: RmsNormParams {
                gain: tensors.dense(&p("norm1.gain"))?,
                epsilon: crate::nn::NORM_EPSILON,
            },
            norm2: RmsNormParams {
                gain: tensors.dense(&p("norm2.gain"))?,
                epsilon: crate::nn::NORM_EPSILON,
            },
        });
    }
    let final_norm = RmsNormParams {
        gain: tensors.dense("decoder.final_norm.gain")?,
        epsilon: crate::nn::NORM_EPSILON,
    };
    let lm_head = tensors.linear("decoder.lm_head")?;
    let decoder = DecoderWeights::new(*d, token_embedding, blocks, final_norm, lm_head)?;

    let vision = match &config.vision {
        None => None,
        Some(vc) => {
            let patch_projection = tensors.dense("vision.patch_projection")?;
            let class_token = if vc.use_class_token {
                Some(tensors.dense("vision.class_token")?)
            } else {
                None
            };
            let position_embedding = tensors.dense("vision.position_embedding")?;
            let mut layers = Vec::with_capacity(vc.num_layers);
            for i in 0..vc.num_layers {
                let p = |suffix: &str| format!("vision.layer{i}.{suffix}");
                layers.push(VisionBlockWeights {
                    ln1: LayerNormParams {
                        gain: tensors.dense(&p("ln1.gain"))?,
                        bias: tensors.dense(&p("ln1.bias"))?,
                        epsilon: crate::nn::NORM_EPSILON,
                    },
                    attn: AttentionParams {
                        wq: tensors.linear(&p("attn.wq"))?,
                        wk: tensors.linear(&p("attn.wk"))?,
                        wv: tensors.linear(&p("attn.wv"))?,
                        wo: tensors.linear(&p("attn.wo"))?,
                        num_heads: vc.num_heads,
                    },
                    ln2: LayerNormParams {
                        gain: tensors.dense(&p("ln2.gain"))?,
                        bias: tensors.dense(&p("ln2.bias"))?,
                        epsilon: crate::nn::NORM_EPSILON,
                    },
                    mlp_in: tensors.dense(&p("mlp_in"))?,
                    mlp_out: tensors.dense(&p("mlp_out"))?,
                });
            }
            let w = VisionWeights {
                config: *vc,
                patch_projection,
                class_token,
                position_embedding,
                layers,
            };
            w.validate()?;
            Some(w)
        }
    };

    let projector = match &config.projector {
        None => None,
        Some(spec) => {
            let mut stages = Vec::with_capacity(spec.stages.len());
            for (i, stage) in spec.stages.iter().enumerate() {
                let p = |suffix: &str| format!("projector.stage{i}.{suffix}");
                match stage {
                    Stage::Pointwise { .. } => stages.push(StageWeights::Pointwise(ConvParams {
                        kind: ConvKind::Pointwise,
                        weight: tensors.dense(&p("pw.weight"))?,
                        bias: Some(tensors.dense(&p("pw.bias"))?),
                        stride: 1,
                        padding: 0,
                    })),
                    Stage::DwPw { stride, .. } => stages.push(StageWeights::DwPw(DwPwWeights {
                        dw: ConvParams {
                            kind: ConvKind::Depthwise,
                            weight: tensors.dense(&p("dw.weight"))?,
                            bias: Some(tensors.dense(&p("dw.bias"))?),
                            stride: *stride,
                            padding: (DW_KERNEL - 1) / 2,
                        },
                        ln1: LayerNormParams {
                            gain: tensors.dense(&p("ln1.gain"))?,
                            bias: tensors.dense(&p("ln1.bias"))?,
                            epsilon: crate::nn::NORM_EPSILON,
                        },
                        pw: ConvParams {
                            kind: ConvKind::Pointwise,
                            weight: tensors.dense(&p("pw.weight"))?,
                            bias: Some(tensors.dense(&p("pw.bias"))?),
                            stride: 1,
                            padding: 0,
                        },
                        ln2: LayerNormParams {
                            gain: tensors.dense(&p("ln2.gain"))?,
                            bias: tensors.dense(&p("ln2.bias"))?,
                            epsilon: crate::nn::NORM_EPSILON,
                        },
                    })),
                }
            }
            Some(crate::projector::ProjectorWeights {
                spec: spec.clone(),
                stages,
            })
        }
    };

    Ok(ModelWeights {
        decoder,
        vision,
        projector,
    })
}

fn read_payload(dtype: u8, dims: &[u32], bytes: &[u8]) -> Result<TensorPayload> {
    match dtype {
        0 => {
            let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
            let mut data = Vec::with_capacity(bytes.len() / 4);
            for chunk in bytes.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            Ok(TensorPayload::Dense(Tensor::new(&shape, data)?))
        }
        1 | 2 => {
            let mode = if dtype == 1 {
                QuantMode::Q8
            } else {
                QuantMode::Q4
            };
            let rows = dims[0] as usize;
            let cols = dims[1] as usize;
            let padded = cols.div_ceil(GROUP_SIZE) * GROUP_SIZE;
            let scale_bytes = 4 * (rows * padded / GROUP_SIZE);
            let mut scales = Vec::with_capacity(scale_bytes / 4);
            for chunk in bytes[..scale_bytes].chunks_exact(4) {
                scales.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            let codes = bytes[scale_bytes..].to_vec();
            Ok(TensorPayload::Quant(QuantizedTensor::from_parts(
                mode,
                [rows, cols],
                scales,
                codes,
            )?))
        }
        other => Err(Error::MalformedConfig {
            reason: format!("unknown dtype tag {other}"),
        }),
    }
}

/// Load a checkpoint written by [`save`]; the result is bitwise identical to
/// the saved weights, including quantized tensors.
pub fn load(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let data = std::fs::read(path)?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
    };
    if cur.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { version });
    }
    let config_len = cur.u32()? as u64;
    let config_bytes = cur.take(config_len)?;
    let config_text = std::str::from_utf8(config_bytes).map_err(|_| Error::MalformedConfig {
        reason: "config blob is not UTF-8".into(),
    })?;
    let config = parse_model_config(&ConfigMap::parse(config_text)?)?;

    let count = cur.u32()? as usize;
    struct Entry {
        name: String,
        dtype: u8,
        dims: Vec<u32>,
        offset: u64,
        len: u64,
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as u64;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| {
            Error::MalformedConfig {
                reason: "tensor name is not UTF-8".into(),
            }
        })?;
        let dtype = cur.u8()?;
        let rank = cur.u8()? as usize;
        if rank == 0 || rank > crate::tensor::MAX_RANK {
            return Err(Error::MalformedConfig {
                reason: format!("tensor {name:?} has invalid rank {rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()?);
        }
        let offset = cur.u64()?;
        let len = blob_len_for(dtype, &dims)?;
        entries.push(Entry {
            name,
            dtype,
            dims,
            offset,
            len,
        });
    }

    let header_end = cur.pos;
    let mut previous_end = header_end;
    let mut seen = std::collections::HashSet::new();
    let mut tensors = HashMap::with_capacity(entries.len());
    for e in &entries {
        if !seen.insert(e.name.clone()) {
            return Err(Error::DuplicateTensor {
                name: e.name.clone(),
            });
        }
        if e.offset % ALIGN != 0 {
            return Err(Error::BadAlignment {
                name: e.name.clone(),
                offset: e.offset,
            });
        }
        if e.offset < previous_end {
            return Err(Error::OffsetOverlap {
                name: e.name.clone(),
                offset: e.offset,
                end: e.offset + e.len,
                previous_end,
            });
        }
        let end = e.offset.checked_add(e.len).ok_or(Error::Truncated {
            offset: e.offset,
            needed: e.len,
            available: data.len() as u64,
        })?;
        if end > data.len() as u64 {
            return Err(Error::Truncated {
                offset: e.offset,
                needed: e.len,
                available: data.len() as u64,
            });
        }
        previous_end = end;
        let bytes = &data[e.offset as usize..end as usize];
        tensors.insert(e.name.clone(), read_payload(e.dtype, &e.dims, bytes)?);
    }

    rebuild_weights(&config, &mut TensorMap(tensors))
}
