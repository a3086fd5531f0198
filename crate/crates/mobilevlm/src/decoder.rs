//! MobileLLaMA-style autoregressive decoder: embedding, stacked pre-norm
//! transformer blocks (RMSNorm, causal attention with RoPE, SwiGLU), final
//! norm and output projection.
//!
//! Weights are shareable read-only across sessions; each decoding session
//! owns one [`KvCache`].

use crate::error::{Error, Result};
use crate::nn::{
    causal_attention, rms_norm, swiglu_ffn, AttentionCache, AttentionParams, Linear, RmsNormParams,
    RopeTable, SwigluParams, ROPE_BASE,
};
use crate::quant::QuantMode;
use crate::tensor::{add_inplace, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub num_blocks: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
}

/// SwiGLU hidden width: 8/3 expansion rounded up to a multiple of 256.
pub fn swiglu_hidden(dim: usize) -> usize {
    256 * (8 * dim).div_ceil(3 * 256)
}

impl DecoderConfig {
    pub fn mobilellama_1_4b() -> Self {
        Self {
            num_blocks: 24,
            dim: 2048,
            num_heads: 16,
            context_length: 2048,
            vocab_size: 32000,
        }
    }

    pub fn mobilellama_2_7b() -> Self {
        Self {
            num_blocks: 32,
            dim: 2560,
            num_heads: 32,
            context_length: 2048,
            vocab_size: 32000,
        }
    }

    pub fn swiglu_hidden(&self) -> usize {
        swiglu_hidden(self.dim)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0
            || self.dim == 0
            || self.num_heads == 0
            || self.context_length == 0
            || self.vocab_size == 0
        {
            return Err(Error::InvalidShape {
                op: "DecoderConfig",
                shape: vec![self.num_blocks, self.dim, self.num_heads],
                reason: "all config entries must be positive".into(),
            });
        }
        if self.dim % self.num_heads != 0 {
            return Err(Error::InvalidShape {
                op: "DecoderConfig",
                shape: vec![self.dim, self.num_heads],
                reason: "dim must be divisible by num_heads".into(),
            });
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "DecoderConfig",
                shape: vec![self.head_dim()],
                reason: "head_dim must be even for rotary embeddings".into(),
            });
        }
        Ok(())
    }
}

/// Closed-form parameter count:
/// `2·vocab·dim` (embedding and untied head) `+ blocks·(4·dim² + 3·dim·h + 2·dim) + dim`.
pub fn count_parameters(config: &DecoderConfig) -> u64 {
    let d = config.dim as u64;
    let v = config.vocab_size as u64;
    let h = config.swiglu_hidden() as u64;
    let b = config.num_blocks as u64;
    2 * v * d + b * (4 * d * d + 3 * d * h + 2 * d) + d
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub attn: AttentionParams,
    pub ffn: SwigluParams,
    pub norm1: RmsNormParams,
    pub norm2: RmsNormParams,
}

#[derive(Debug, Clone)]
pub struct DecoderWeights {
    pub config: DecoderConfig,
    pub token_embedding: Linear,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: RmsNormParams,
    pub lm_head: Linear,
    rope: RopeTable,
}

impl DecoderWeights {
    pub fn new(
        config: DecoderConfig,
        token_embedding: Linear,
        blocks: Vec<BlockWeights>,
        final_norm: RmsNormParams,
        lm_head: Linear,
    ) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.num_blocks {
            return Err(Error::InvalidShape {
                op: "DecoderWeights",
                shape: vec![blocks.len()],
                reason: format!("expected {} blocks", config.num_blocks),
            });
        }
        if token_embedding.shape() != [config.vocab_size, config.dim] {
            return Err(Error::ShapeMismatch {
                op: "DecoderWeights embedding",
                left: token_embedding.shape().to_vec(),
                right: vec![config.vocab_size, config.dim],
            });
        }
        if lm_head.shape() != [config.dim, config.vocab_size] {
            return Err(Error::ShapeMismatch {
                op: "DecoderWeights lm_head",
                left: lm_head.shape().to_vec(),
                right: vec![config.dim, config.vocab_size],
            });
        }
        let rope = RopeTable::new(ROPE_BASE, config.head_dim(), config.context_length)?;
        Ok(Self {
            config,
            token_embedding,
            blocks,
            final_norm,
            lm_head,
            rope,
        })
    }

    pub fn rope(&self) -> &RopeTable {
        &self.rope
    }

    /// Quant mode of the matmul weights, `None` when dense f32.
    pub fn quant_mode(&self) -> Option<QuantMode> {
        match &self.lm_head {
            Linear::Dense(_) => None,
            Linear::Quant(q) => Some(q.mode()),
        }
    }

    /// Convert every matmul weight to group-quantized storage, tensor by
    /// tensor so the f32 originals are dropped as we go.
    pub fn quantize_in_place(&mut self, mode: QuantMode) -> Result<()> {
        let quantize_linear = |l: &mut Linear| -> Result<()> {
            if let Linear::Dense(t) = l {
                let q = crate::quant::quantize(t, mode)?;
                *l = Linear::Quant(q);
            }
            Ok(())
        };
        quantize_linear(&mut self.token_embedding)?;
        for block in &mut self.blocks {
            quantize_linear(&mut block.attn.wq)?;
            quantize_linear(&mut block.attn.wk)?;
            quantize_linear(&mut block.attn.wv)?;
            quantize_linear(&mut block.attn.wo)?;
            quantize_linear(&mut block.ffn.w_gate)?;
            quantize_linear(&mut block.ffn.w_up)?;
            quantize_linear(&mut block.ffn.w_down)?;
        }
        quantize_linear(&mut self.lm_head)
    }

    /// Bytes of weight storage (codes + scales for quantized tensors).
    pub fn storage_bytes(&self) -> u64 {
        let mut total = self.token_embedding.storage_bytes() + self.lm_head.storage_bytes();
        total += self.final_norm.gain.len() * 4;
        for b in &self.blocks {
            total += b.attn.wq.storage_bytes()
                + b.attn.wk.storage_bytes()
                + b.attn.wv.storage_bytes()
                + b.attn.wo.storage_bytes()
                + b.ffn.w_gate.storage_bytes()
                + b.ffn.w_up.storage_bytes()
                + b.ffn.w_down.storage_bytes()
                + b.norm1.gain.len() * 4
                + b.norm2.gain.len() * 4;
        }
        total as u64
    }
}

/// Per-session cache: one appendable K/V buffer per block, advanced in
/// lockstep so every block shares the same fill count.
#[derive(Debug, Clone)]
pub struct KvCache {
    blocks: Vec<AttentionCache>,
    capacity: usize,
}

impl KvCache {
    pub fn new(config: &DecoderConfig) -> Self {
        let blocks = (0..config.num_blocks)
            .map(|_| {
                AttentionCache::new(config.context_length, config.num_heads, config.head_dim())
            })
            .collect();
        Self {
            blocks,
            capacity: config.context_length,
        }
    }

    pub fn filled(&self) -> usize {
        debug_assert!(self
            .blocks
            .windows(2)
            .all(|w| w[0].filled() == w[1].filled()));
        self.blocks.first().map_or(0, |b| b.filled())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        for b in &mut self.blocks {
            b.clear();
        }
    }
}

/// Either raw token ids (embedded via the token table) or pre-computed
/// embeddings of width `dim`, e.g. projected image tokens.
pub enum DecoderInput<'a> {
    Tokens(&'a [u32]),
    Embeddings(&'a Tensor),
}

/// Embed token ids through the embedding table, dequantizing rows if the
/// table is quantized.
pub fn embed_tokens(ids: &[u32], weights: &DecoderWeights) -> Result<Tensor> {
    let dim = weights.config.dim;
    if ids.is_empty() {
        return Err(Error::InvalidShape {
            op: "embed_tokens",
            shape: vec![0],
            reason: "empty token sequence".into(),
        });
    }
    let mut data = vec![0.0f32; ids.len() * dim];
    for (row, &id) in data.chunks_mut(dim).zip(ids) {
        if id as usize >= weights.config.vocab_size {
            return Err(Error::TokenOutOfVocab {
                id,
                vocab_size: weights.config.vocab_size,
            });
        }
        weights.token_embedding.row_f32(id as usize, row);
    }
    Tensor::new(&[ids.len(), dim], data)
}

/// Run the decoder over new positions, returning logits `[n, vocab]` and
/// advancing the cache by `n`.
pub fn forward(
    input: DecoderInput<'_>,
    weights: &DecoderWeights,
    cache: &mut KvCache,
) -> Result<Tensor> {
    let mut x = match input {
        DecoderInput::Tokens(ids) => embed_tokens(ids, weights)?,
        DecoderInput::Embeddings(e) => {
            if e.rank() != 2 || e.cols() != weights.config.dim {
                return Err(Error::ShapeMismatch {
                    op: "decoder_forward embeddings",
                    left: e.shape().to_vec(),
                    right: vec![weights.config.dim],
                });
            }
            e.clone()
        }
    };
    let n = x.rows();
    if cache.blocks.len() != weights.config.num_blocks {
        return Err(Error::InvalidShape {
            op: "decoder_forward",
            shape: vec![cache.blocks.len()],
            reason: format!(
                "cache has wrong block count, expected {}",
                weights.config.num_blocks
            ),
        });
    }
    if cache.filled() + n > cache.capacity {
        return Err(Error::ContextOverflow {
            requested: n,
            filled: cache.filled(),
            capacity: cache.capacity,
        });
    }

    for (block, kv) in weights.blocks.iter().zip(cache.blocks.iter_mut()) {
        let normed = rms_norm(&x, &block.norm1)?;
        let attn_out = causal_attention(&normed, &block.attn, &weights.rope, Some(kv))?;
        add_inplace(&mut x, &attn_out)?;
        let normed = rms_norm(&x, &block.norm2)?;
        let ffn_out = swiglu_ffn(&normed, &block.ffn)?;
        add_inplace(&mut x, &ffn_out)?;
    }

    let x = rms_norm(&x, &weights.final_norm)?;
    weights.lm_head.matmul(&x)
}

/// Concatenate projected image tokens with embedded text ids, image first:
/// `[H_v ; embed(text_ids)]`. Positions run contiguously across the boundary
/// when the result is fed to [`forward`].
pub fn mixed_prompt_embed(
    image_tokens: &Tensor,
    text_ids: &[u32],
    weights: &DecoderWeights,
) -> Result<Tensor> {
    let dim = weights.config.dim;
    if image_tokens.rank() != 2 || image_tokens.cols() != dim {
        return Err(Error::ShapeMismatch {
            op: "mixed_prompt_embed",
            left: image_tokens.shape().to_vec(),
            right: vec![dim],
        });
    }
    if text_ids.is_empty() {
        return Ok(image_tokens.clone());
    }
    let text = embed_tokens(text_ids, weights)?;
    let mut data = Vec::with_capacity((image_tokens.rows() + text.rows()) * dim);
    data.extend_from_slice(image_tokens.data());
    data.extend_from_slice(text.data());
    Tensor::new(&[image_tokens.rows() + text.rows(), dim], data)
}
