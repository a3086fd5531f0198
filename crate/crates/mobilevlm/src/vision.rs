//! ViT-style patch encoder producing the visual embeddings consumed by the
//! projector: uniform patches, linear patch embedding, learned position
//! embeddings, pre-norm transformer blocks with non-causal attention and a
//! 4x GELU MLP.
//!
//! The class token, when configured, participates in encoding but is dropped
//! from the output so the projector always sees a square token grid.

use crate::error::{Error, Result};
use crate::nn::{layer_norm, AttentionParams, LayerNormParams};
use crate::tensor::{add_inplace, gelu, matmul, softmax_slice, Tensor};

/// Which encoder layer the output features are taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureLayer {
    #[default]
    Final,
    Penultimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisionConfig {
    /// Square input resolution (H = W).
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub use_class_token: bool,
    /// Input channel count; 3 for real images.
    pub channels: usize,
    pub feature_layer: FeatureLayer,
}

impl VisionConfig {
    /// CLIP ViT-L/14 at 336x336: grid 24, 576 patch tokens.
    pub fn clip_vit_l14_336() -> Self {
        Self {
            image_size: 336,
            patch_size: 14,
            embed_dim: 1024,
            num_layers: 24,
            num_heads: 16,
            use_class_token: true,
            channels: 3,
            feature_layer: FeatureLayer::Final,
        }
    }

    /// Desk-scale encoder: 84x84/14 -> 6x6 grid of 36 tokens.
    pub fn toy() -> Self {
        Self {
            image_size: 84,
            patch_size: 14,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            use_class_token: true,
            channels: 3,
            feature_layer: FeatureLayer::Final,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.patch_size == 0
            || self.embed_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.channels == 0
        {
            return Err(Error::InvalidShape {
                op: "VisionConfig",
                shape: vec![self.image_size, self.patch_size, self.embed_dim],
                reason: "all config entries must be positive".into(),
            });
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidShape {
                op: "VisionConfig",
                shape: vec![self.image_size, self.patch_size],
                reason: "image size must be divisible by patch size".into(),
            });
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidShape {
                op: "VisionConfig",
                shape: vec![self.embed_dim, self.num_heads],
                reason: "embed_dim must divide into heads".into(),
            });
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `N_v = HW / P²`.
    pub fn num_patches(&self) -> usize {
        let g = self.grid_side();
        g * g
    }

    /// Sequence length inside the encoder (patches plus class token).
    pub fn seq_len(&self) -> usize {
        self.num_patches() + usize::from(self.use_class_token)
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.embed_dim
    }
}

/// Reduced-input-resolution variant: same patch size, image side divided by
/// `factor`, token count divided by `factor²`.
pub fn rir_config(base: &VisionConfig, factor: usize) -> Result<VisionConfig> {
    if factor == 0 || base.image_size % (factor * base.patch_size) != 0 {
        return Err(Error::InvalidShape {
            op: "rir_config",
            shape: vec![base.image_size, base.patch_size, factor],
            reason: "image size must be divisible by factor * patch size".into(),
        });
    }
    Ok(VisionConfig {
        image_size: base.image_size / factor,
        ..*base
    })
}

#[derive(Debug, Clone)]
pub struct VisionBlockWeights {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp_in: Tensor,
    pub mlp_out: Tensor,
}

#[derive(Debug, Clone)]
pub struct VisionWeights {
    pub config: VisionConfig,
    /// `[P·P·C, D_v]` linear patch embedding.
    pub patch_projection: Tensor,
    /// Present iff the config uses a class token.
    pub class_token: Option<Tensor>,
    /// `[N_v(+1), D_v]` learned position embeddings.
    pub position_embedding: Tensor,
    pub layers: Vec<VisionBlockWeights>,
}

impl VisionWeights {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let cfg = &self.config;
        let patch_in = cfg.patch_size * cfg.patch_size * cfg.channels;
        if self.patch_projection.shape() != [patch_in, cfg.embed_dim] {
            return Err(Error::ShapeMismatch {
                op: "VisionWeights patch_projection",
                left: self.patch_projection.shape().to_vec(),
                right: vec![patch_in, cfg.embed_dim],
            });
        }
        if self.class_token.is_some() != cfg.use_class_token {
            return Err(Error::InvalidShape {
                op: "VisionWeights",
                shape: vec![],
                reason: "class token presence must match the config".into(),
            });
        }
        if self.position_embedding.shape() != [cfg.seq_len(), cfg.embed_dim] {
            return Err(Error::ShapeMismatch {
                op: "VisionWeights position_embedding",
                left: self.position_embedding.shape().to_vec(),
                right: vec![cfg.seq_len(), cfg.embed_dim],
            });
        }
        if self.layers.len() != cfg.num_layers {
            return Err(Error::InvalidShape {
                op: "VisionWeights",
                shape: vec![self.layers.len()],
                reason: format!("expected {} layers", cfg.num_layers),
            });
        }
        Ok(())
    }

    pub fn storage_bytes(&self) -> u64 {
        let mut total = self.patch_projection.len() + self.position_embedding.len();
        if let Some(c) = &self.class_token {
            total += c.len();
        }
        for l in &self.layers {
            total += l.attn.wq.param_count()
                + l.attn.wk.param_count()
                + l.attn.wv.param_count()
                + l.attn.wo.param_count()
                + l.mlp_in.len()
                + l.mlp_out.len()
                + l.ln1.gain.len() * 2
                + l.ln2.gain.len() * 2;
        }
        (total * 4) as u64
    }
}

/// Bidirectional multi-head self-attention, no positional rotation. The
/// encoder injects position through learned embeddings instead.
fn encoder_attention(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let d = p.dim();
    let n = x.rows();
    let heads = p.num_heads;
    let hd = p.head_dim();
    let q = p.wq.matmul(x)?.into_data();
    let k = p.wk.matmul(x)?.into_data();
    let v = p.wv.matmul(x)?.into_data();

    let scale = 1.0 / (hd as f32).sqrt();
    let mut ctx = vec![0.0f32; n * d];
    let mut scores = vec![0.0f32; n];
    for t in 0..n {
        for h in 0..heads {
            let q_row = &q[(t * heads + h) * hd..(t * heads + h) * hd + hd];
            for (j, s) in scores.iter_mut().enumerate() {
                let k_row = &k[(j * heads + h) * hd..(j * heads + h) * hd + hd];
                let mut dot = 0.0f32;
                for (a, b) in q_row.iter().zip(k_row) {
                    dot += a * b;
                }
                *s = dot * scale;
            }
            softmax_slice(&mut scores);
            let dst = &mut ctx[t * d + h * hd..t * d + (h + 1) * hd];
            for (j, &wgt) in scores.iter().enumerate() {
                let v_row = &v[(j * heads + h) * hd..(j * heads + h) * hd + hd];
                for (o, &vv) in dst.iter_mut().zip(v_row) {
                    *o += wgt * vv;
                }
            }
        }
    }
    p.wo.matmul(&Tensor::new(&[n, d], ctx)?)
}

/// Cut the image into `P×P` patches, row-major over the grid, each patch
/// flattened row-major as `(y, x, channel)`.
fn patchify(image: &Tensor, cfg: &VisionConfig) -> Tensor {
    let (g, p, c) = (cfg.grid_side(), cfg.patch_size, cfg.channels);
    let w = cfg.image_size;
    let mut out = vec![0.0f32; g * g * p * p * c];
    let mut cursor = 0;
    for pr in 0..g {
        for pc in 0..g {
            for y in 0..p {
                let iy = pr * p + y;
                for x in 0..p {
                    let ix = pc * p + x;
                    let src = (iy * w + ix) * c;
                    out[cursor..cursor + c].copy_from_slice(&image.data()[src..src + c]);
                    cursor += c;
                }
            }
        }
    }
    Tensor::new(&[g * g, p * p * c], out).expect("patch grid shape")
}

/// `f = F_enc(X_v)`: encode an `[H, W, C]` image into exactly `N_v` patch
/// token embeddings `[N_v, D_v]`.
pub fn encode_image(image: &Tensor, weights: &VisionWeights) -> Result<Tensor> {
    weights.validate()?;
    let cfg = &weights.config;
    if image.rank() != 3
        || image.shape()[0] != cfg.image_size
        || image.shape()[1] != cfg.image_size
        || image.shape()[2] != cfg.channels
    {
        return Err(Error::ShapeMismatch {
            op: "encode_image",
            left: image.shape().to_vec(),
            right: vec![cfg.image_size, cfg.image_size, cfg.channels],
        });
    }

    let patches = patchify(image, cfg);
    let embedded = matmul(&patches, &weights.patch_projection)?;

    let d = cfg.embed_dim;
    let n = cfg.seq_len();
    let mut data = Vec::with_capacity(n * d);
    if let Some(cls) = &weights.class_token {
        data.extend_from_slice(cls.data());
    }
    data.extend_from_slice(embedded.data());
    let mut x = Tensor::new(&[n, d], data)?;
    add_inplace(&mut x, &weights.position_embedding)?;

    let depth = match cfg.feature_layer {
        FeatureLayer::Final => cfg.num_layers,
        FeatureLayer::Penultimate => cfg.num_layers - 1,
    };
    for layer in &weights.layers[..depth] {
        let normed = layer_norm(&x, &layer.ln1)?;
        let attn_out = encoder_attention(&normed, &layer.attn)?;
        add_inplace(&mut x, &attn_out)?;
        let normed = layer_norm(&x, &layer.ln2)?;
        let hidden = gelu(&matmul(&normed, &layer.mlp_in)?);
        let mlp_out = matmul(&hidden, &layer.mlp_out)?;
        add_inplace(&mut x, &mlp_out)?;
    }

    // Drop the class token: the projector consumes the square patch grid.
    let skip = usize::from(cfg.use_class_token);
    let n_v = cfg.num_patches();
    Tensor::new(&[n_v, d], x.data()[skip * d..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::weights;

    fn random_image(cfg: &VisionConfig, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let n = cfg.image_size * cfg.image_size * cfg.channels;
        Tensor::new(
            &[cfg.image_size, cfg.image_size, cfg.channels],
            (0..n).map(|_| rng.next_range(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn clip_preset_token_arithmetic() {
        let cfg = VisionConfig::clip_vit_l14_336();
        assert_eq!(cfg.grid_side(), 24);
        assert_eq!(cfg.num_patches(), 576);
        assert_eq!(cfg.seq_len(), 577);
        assert_eq!(cfg.embed_dim, 1024);
    }

    #[test]
    fn toy_encoder_output_shape() {
        let cfg = VisionConfig::toy();
        let w = weights::init_vision(&cfg, 1).unwrap();
        let img = random_image(&cfg, 2);
        let f = encode_image(&img, &w).unwrap();
        assert_eq!(f.shape(), &[36, 32]);
    }

    #[test]
    fn output_token_count_is_weight_independent() {
        for (seed, layers) in [(3u64, 1usize), (4, 3)] {
            let cfg = VisionConfig {
                num_layers: layers,
                ..VisionConfig::toy()
            };
            let w = weights::init_vision(&cfg, seed).unwrap();
            let f = encode_image(&random_image(&cfg, seed + 10), &w).unwrap();
            assert_eq!(f.shape(), &[cfg.num_patches(), cfg.embed_dim]);
        }
    }

    #[test]
    fn zero_image_gives_identical_rows() {
        let cfg = VisionConfig::toy();
        let mut w = weights::init_vision(&cfg, 5).unwrap();
        // Zero position embeddings so nothing distinguishes the patches.
        w.position_embedding = Tensor::zeros(&[cfg.seq_len(), cfg.embed_dim]);
        let img = Tensor::zeros(&[84, 84, 3]);
        let f = encode_image(&img, &w).unwrap();
        let first = f.row(0).to_vec();
        for i in 1..f.rows() {
            assert_eq!(f.row(i), &first[..], "row {i} differs");
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant_without_positions() {
        let cfg = VisionConfig {
            use_class_token: false,
            ..VisionConfig::toy()
        };
        let mut w = weights::init_vision(&cfg, 6).unwrap();
        w.position_embedding = Tensor::zeros(&[cfg.seq_len(), cfg.embed_dim]);

        let img = random_image(&cfg, 7);
        let f = encode_image(&img, &w).unwrap();

        // Swap two patch blocks in the image: patches (0,0) and (1,2).
        let mut swapped = img.clone();
        let p = cfg.patch_size;
        let (w_img, c) = (cfg.image_size, cfg.channels);
        let (ar, ac, br, bc) = (0usize, 0usize, 1usize, 2usize);
        for y in 0..p {
            for x in 0..p {
                for ch in 0..c {
                    let ia = ((ar * p + y) * w_img + (ac * p + x)) * c + ch;
                    let ib = ((br * p + y) * w_img + (bc * p + x)) * c + ch;
                    swapped.data_mut().swap(ia, ib);
                }
            }
        }
        let g = encode_image(&swapped, &w).unwrap();
        let side = cfg.grid_side();
        let (ta, tb) = (ar * side + ac, br * side + bc);
        // Attention sums run in permuted order, so allow f32 rounding slack.
        let close = |a: &[f32], b: &[f32], what: &str| {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-5, "{what}: {x} vs {y}");
            }
        };
        close(f.row(ta), g.row(tb), "swapped token a");
        close(f.row(tb), g.row(ta), "swapped token b");
        for t in 0..cfg.num_patches() {
            if t != ta && t != tb {
                close(f.row(t), g.row(t), "untouched token");
            }
        }
    }

    #[test]
    fn penultimate_feature_layer_skips_the_last_block() {
        let cfg = VisionConfig {
            feature_layer: FeatureLayer::Penultimate,
            ..VisionConfig::toy()
        };
        let mut w = weights::init_vision(&cfg, 8).unwrap();
        let img = random_image(&cfg, 9);
        let pen = encode_image(&img, &w).unwrap();

        w.config.feature_layer = FeatureLayer::Final;
        let fin = encode_image(&img, &w).unwrap();
        assert_ne!(pen.data(), fin.data());

        // With one layer lopped off, penultimate(d layers) == final(d-1 layers).
        let mut shallow = w.clone();
        shallow.config.num_layers = 1;
        shallow.layers.truncate(1);
        shallow.config.feature_layer = FeatureLayer::Final;
        shallow.position_embedding = w.position_embedding.clone();
        let fin_shallow = encode_image(&img, &shallow).unwrap();
        assert_eq!(pen.data(), fin_shallow.data());
    }

    #[test]
    fn dimension_errors_are_reported() {
        let cfg = VisionConfig::toy();
        let w = weights::init_vision(&cfg, 10).unwrap();
        let wrong = Tensor::zeros(&[83, 83, 3]);
        assert!(matches!(
            encode_image(&wrong, &w),
            Err(Error::ShapeMismatch { .. })
        ));
        let bad_cfg = VisionConfig {
            image_size: 85,
            ..cfg
        };
        assert!(bad_cfg.validate().is_err());
    }

    #[test]
    fn rir_halves_resolution_and_quarters_tokens() {
        let base = VisionConfig::clip_vit_l14_336();
        let rir = rir_config(&base, 2).unwrap();
        assert_eq!(rir.image_size, 168);
        assert_eq!(rir.patch_size, 14);
        assert_eq!(rir.num_patches(), 144);

        let toy = rir_config(&VisionConfig::toy(), 2).unwrap();
        assert_eq!(toy.image_size, 42);
        assert_eq!(toy.num_patches(), 9);

        let indivisible = VisionConfig {
            image_size: 70,
            ..VisionConfig::toy()
        };
        assert!(rir_config(&indivisible, 2).is_err());
    }
}
