//! Deterministic random initialization for the full weight set.
//!
//! All linear and convolution weights draw from `uniform(-1/sqrt(fan_in),
//! +1/sqrt(fan_in))` using the counter-based generator in [`crate::rng`],
//! consumed as a single stream in the fixed order below. Norm gains
//! initialize to 1, all biases to 0, neither consuming the stream.
//!
//! Stream order:
//! 1. decoder token embedding, then per block `wq wk wv wo w_gate w_up
//!    w_down`, then the LM head
//! 2. vision patch projection, class token, position embedding, then per
//!    layer `wq wk wv wo mlp_in mlp_out`
//! 3. projector stages in order; depthwise kernels use `fan_in = k²`
//!
//! The same seed therefore reproduces bitwise-identical weights anywhere.

use crate::decoder::{BlockWeights, DecoderConfig, DecoderWeights};
use crate::error::Result;
use crate::nn::{
    AttentionParams, ConvKind, ConvParams, LayerNormParams, Linear, RmsNormParams, SwigluParams,
};
use crate::projector::{
    DwPwWeights, ProjectorSpec, ProjectorWeights, Stage, StageWeights, DW_KERNEL,
};
use crate::quant::QuantMode;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::vision::{VisionBlockWeights, VisionConfig, VisionWeights};

/// Architecture descriptor for a full model: decoder always, vision encoder
/// and projector for multimodal configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub vision: Option<VisionConfig>,
    pub projector: Option<ProjectorSpec>,
}

impl ModelConfig {
    pub fn decoder_only(decoder: DecoderConfig) -> Self {
        Self {
            decoder,
            vision: None,
            projector: None,
        }
    }

    /// Desk-scale VLM: 84x84 toy encoder, LDP 32->64, 2-block decoder.
    /// The 512-entry vocabulary leaves room for the byte-fallback ids.
    pub fn toy() -> Self {
        Self {
            decoder: DecoderConfig {
                num_blocks: 2,
                dim: 64,
                num_heads: 4,
                context_length: 256,
                vocab_size: 512,
            },
            vision: Some(VisionConfig::toy()),
            projector: Some(crate::projector::ldp_spec(32, 64)),
        }
    }

    /// Full MobileVLM at the 1.4B decoder scale. Weights are large; export
    /// at f32 writes ~5.5 GB.
    pub fn mobilevlm_1_4b() -> Self {
        Self {
            decoder: DecoderConfig::mobilellama_1_4b(),
            vision: Some(VisionConfig::clip_vit_l14_336()),
            projector: Some(crate::projector::ldp_spec(1024, 2048)),
        }
    }

    pub fn mobilevlm_2_7b() -> Self {
        Self {
            decoder: DecoderConfig::mobilellama_2_7b(),
            vision: Some(VisionConfig::clip_vit_l14_336()),
            projector: Some(crate::projector::ldp_spec(1024, 2560)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if let Some(v) = &self.vision {
            v.validate()?;
        }
        if let Some(p) = &self.projector {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub decoder: DecoderWeights,
    pub vision: Option<VisionWeights>,
    pub projector: Option<ProjectorWeights>,
}

impl ModelWeights {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            decoder: self.decoder.config,
            vision: self.vision.as_ref().map(|v| v.config),
            projector: self.projector.as_ref().map(|p| p.spec.clone()),
        }
    }

    /// Quantize the decoder's matmul weights. The vision encoder and the
    /// projector keep their original precision.
    pub fn quantize_in_place(&mut self, mode: QuantMode) -> Result<()> {
        self.decoder.quantize_in_place(mode)
    }

    pub fn quant_mode(&self) -> Option<QuantMode> {
        self.decoder.quant_mode()
    }

    pub fn quant_mode_name(&self) -> &'static str {
        match self.quant_mode() {
            None => "f32",
            Some(m) => m.name(),
        }
    }

    pub fn storage_bytes(&self) -> u64 {
        self.decoder.storage_bytes()
            + self.vision.as_ref().map_or(0, |v| v.storage_bytes())
            + self.projector.as_ref().map_or(0, |p| p.storage_bytes())
    }
}

fn uniform_tensor(rng: &mut SplitMix64, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.next_range(-bound, bound)).collect();
    Tensor::new(shape, data).expect("valid init shape")
}

fn init_decoder_with(rng: &mut SplitMix64, config: &DecoderConfig) -> Result<DecoderWeights> {
    config.validate()?;
    let d = config.dim;
    let h = config.swiglu_hidden();
    let token_embedding = Linear::Dense(uniform_tensor(rng, &[config.vocab_size, d], d));
    let blocks = (0..config.num_blocks)
        .map(|_| BlockWeights {
            attn: AttentionParams {
                wq: Linear::Dense(uniform_tensor(rng, &[d, d], d)),
                wk: Linear::Dense(uniform_tensor(rng, &[d, d], d)),
                wv: Linear::Dense(uniform_tensor(rng, &[d, d], d)),
                wo: Linear::Dense(uniform_tensor(rng, &[d, d], d)),
                num_heads: config.num_heads,
            },
            ffn: SwigluParams {
                w_gate: Linear::Dense(uniform_tensor(rng, &[d, h], d)),
                w_up: Linear::Dense(uniform_tensor(rng, &[d, h], d)),
                w_down: Linear::Dense(uniform_tensor(rng, &[h, d], h)),
            },
            norm1: RmsNormParams::unit(d),
            norm2: RmsNormParams::unit(d),
        })
        .collect();
    let lm_head = Linear::Dense(uniform_tensor(rng, &[d, config.vocab_size], d));
    DecoderWeights::new(
        *config,
        token_embedding,
        blocks,
        RmsNormParams::unit(d),
        lm_head,
    )
}

fn init_vision_with(rng: &mut SplitMix64, config: &VisionConfig) -> Result<VisionWeights> {
    config.validate()?;
    let d = config.embed_dim;
    let patch_in = config.patch_size * config.patch_size * config.channels;
    let patch_projection = uniform_tensor(rng, &[patch_in, d], patch_in);
    let class_token = config.use_class_token.then(|| uniform_tensor(rng, &[d], d));
    let position_embedding = uniform_tensor(rng, &[config.seq_len(), d], d);
    let hidden = config.mlp_hidden();
    let layers = (0..config.num_layers)
        .map(|_| VisionBlockWeights {
            ln1: LayerNormParams::identity(d),
            attn: AttentionParams {
                wq: Linear::Dense(uniform_tensor(rng, &[d, d], d)),
                wk: Linear::Dense(uniform_tensor(rng, &[d, d], d)),
                wv: Linear::Dense(uniform_tensor(rng, &[d, d], d)),
                wo: Linear::Dense(uniform_tensor(rng, &[d, d], d)),
                num_heads: config.num_heads,
            },
            ln2: LayerNormParams::identity(d),
            mlp_in: uniform_tensor(rng, &[d, hidden], d),
            mlp_out: uniform_tensor(rng, &[hidden, d], hidden),
        })
        .collect();
    let w = VisionWeights {
        config: *config,
        patch_projection,
        class_token,
        position_embedding,
        layers,
    };
    w.validate()?;
    Ok(w)
}

fn init_projector_with(rng: &mut SplitMix64, spec: &ProjectorSpec) -> Result<ProjectorWeights> {
    spec.validate()?;
    let stages = spec
        .stages
        .iter()
        .zip(spec.stage_widths())
        .map(|(stage, (c_in, c_out))| match stage {
            Stage::Pointwise { .. } => StageWeights::Pointwise(ConvParams {
                kind: ConvKind::Pointwise,
                weight: uniform_tensor(rng, &[c_in, c_out], c_in),
                bias: Some(Tensor::zeros(&[c_out])),
                stride: 1,
                padding: 0,
            }),
            Stage::DwPw { stride, .. } => StageWeights::DwPw(DwPwWeights {
                dw: ConvParams {
                    kind: ConvKind::Depthwise,
                    weight: uniform_tensor(
                        rng,
                        &[c_in, DW_KERNEL, DW_KERNEL],
                        DW_KERNEL * DW_KERNEL,
                    ),
                    bias: Some(Tensor::zeros(&[c_in])),
                    stride: *stride,
                    padding: (DW_KERNEL - 1) / 2,
                },
                ln1: LayerNormParams::identity(c_in),
                pw: ConvParams {
                    kind: ConvKind::Pointwise,
                    weight: uniform_tensor(rng, &[c_in, c_out], c_in),
                    bias: Some(Tensor::zeros(&[c_out])),
                    stride: 1,
                    padding: 0,
                },
                ln2: LayerNormParams::identity(c_out),
            }),
        })
        .collect();
    Ok(ProjectorWeights {
        spec: spec.clone(),
        stages,
    })
}

/// Deterministically initialize a full weight set from one seed.
pub fn init_random(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    let mut rng = SplitMix64::new(seed);
    let decoder = init_decoder_with(&mut rng, &config.decoder)?;
    let vision = match &config.vision {
        Some(v) => Some(init_vision_with(&mut rng, v)?),
        None => None,
    };
    let projector = match &config.projector {
        Some(p) => Some(init_projector_with(&mut rng, p)?),
        None => None,
    };
    Ok(ModelWeights {
        decoder,
        vision,
        projector,
    })
}

/// Standalone vision-encoder initialization (its own stream from `seed`).
pub fn init_vision(config: &VisionConfig, seed: u64) -> Result<VisionWeights> {
    init_vision_with(&mut SplitMix64::new(seed), config)
}

/// Standalone projector initialization (its own stream from `seed`).
pub fn init_projector(spec: &ProjectorSpec, seed: u64) -> Result<ProjectorWeights> {
    init_projector_with(&mut SplitMix64::new(seed), spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_data(l: &Linear) -> &[f32] {
        l.dense().expect("dense").data()
    }

    #[test]
    fn same_seed_gives_bitwise_identical_weights() {
        let cfg = ModelConfig::toy();
        let a = init_random(&cfg, 42).unwrap();
        let b = init_random(&cfg, 42).unwrap();
        assert_eq!(
            linear_data(&a.decoder.token_embedding),
            linear_data(&b.decoder.token_embedding)
        );
        assert_eq!(
            linear_data(&a.decoder.blocks[1].ffn.w_down),
            linear_data(&b.decoder.blocks[1].ffn.w_down)
        );
        let (va, vb) = (a.vision.unwrap(), b.vision.unwrap());
        assert_eq!(va.patch_projection.data(), vb.patch_projection.data());
        assert_eq!(va.position_embedding.data(), vb.position_embedding.data());
    }

    #[test]
    fn different_seeds_differ_in_every_tensor() {
        let cfg = ModelConfig::toy();
        let a = init_random(&cfg, 1).unwrap();
        let b = init_random(&cfg, 2).unwrap();
        assert_ne!(
            linear_data(&a.decoder.token_embedding),
            linear_data(&b.decoder.token_embedding)
        );
        assert_ne!(
            linear_data(&a.decoder.lm_head),
            linear_data(&b.decoder.lm_head)
        );
        for i in 0..2 {
            assert_ne!(
                linear_data(&a.decoder.blocks[i].attn.wq),
                linear_data(&b.decoder.blocks[i].attn.wq)
            );
            assert_ne!(
                linear_data(&a.decoder.blocks[i].ffn.w_gate),
                linear_data(&b.decoder.blocks[i].ffn.w_gate)
            );
        }
        assert_ne!(
            a.vision.as_ref().unwrap().patch_projection.data(),
            b.vision.as_ref().unwrap().patch_projection.data()
        );
    }

    #[test]
    fn empirical_mean_is_near_zero() {
        // 10k samples uniform on (-b, b): SE = b / sqrt(3 * 10000).
        let mut rng = SplitMix64::new(7);
        let fan_in = 64usize;
        let t = uniform_tensor(&mut rng, &[100, 100], fan_in);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mean = t.data().iter().map(|&v| f64::from(v)).sum::<f64>() / 10_000.0;
        let se = bound / (3.0f64 * 10_000.0).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} vs 3σ {}", 3.0 * se);
    }

    #[test]
    fn norms_start_at_identity_and_biases_at_zero() {
        let w = init_random(&ModelConfig::toy(), 3).unwrap();
        assert!(w.decoder.blocks[0]
            .norm1
            .gain
            .data()
            .iter()
            .all(|&g| g == 1.0));
        let v = w.vision.unwrap();
        assert!(v.layers[0].ln1.bias.data().iter().all(|&b| b == 0.0));
        let p = w.projector.unwrap();
        if let StageWeights::Pointwise(c) = &p.stages[0] {
            assert!(c.bias.as_ref().unwrap().data().iter().all(|&b| b == 0.0));
        } else {
            panic!("ldp starts with a pointwise stage");
        }
    }

    #[test]
    fn weights_respect_fan_in_bounds() {
        let w = init_random(&ModelConfig::toy(), 4).unwrap();
        let bound = 1.0 / 64f32.sqrt();
        for &v in linear_data(&w.decoder.blocks[0].attn.wq) {
            assert!(v.abs() <= bound);
        }
        let h = w.decoder.config.swiglu_hidden() as f32;
        for &v in linear_data(&w.decoder.blocks[0].ffn.w_down) {
            assert!(v.abs() <= 1.0 / h.sqrt());
        }
    }

    #[test]
    fn quantize_in_place_converts_decoder_only() {
        let mut w = init_random(&ModelConfig::toy(), 5).unwrap();
        let f32_bytes = w.storage_bytes();
        w.quantize_in_place(QuantMode::Q8).unwrap();
        assert_eq!(w.quant_mode(), Some(QuantMode::Q8));
        assert!(w.storage_bytes() < f32_bytes);
        assert!(matches!(w.decoder.lm_head, Linear::Quant(_)));
        // Vision and projector stay dense f32.
        assert!(w.vision.unwrap().layers[0].attn.wq.dense().is_some());
    }
}
