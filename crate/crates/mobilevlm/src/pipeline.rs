//! End-to-end assembly: tokenize, encode the image, project, build the
//! mixed prompt, and generate the response autoregressively.
//!
//! Token id layout: ids 0..=255 are the byte-fallback tokens (one per byte
//! value), 256 = BOS, 257 = EOS, 258 = the image placeholder, and vocab-file
//! entries start at 259. Byte fallback makes tokenization total, so
//! `detokenize(tokenize(s)) == s` for every string. Raw prompts are used
//! as-is; no chat template and no implicit BOS.

use std::collections::HashMap;
use std::time::Instant;

use crate::decoder::{self, DecoderInput, KvCache};
use crate::error::{Error, Result};
use crate::projector::{self};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::vision;
use crate::weights::{ModelConfig, ModelWeights};

pub const BOS_TOKEN: u32 = 256;
pub const EOS_TOKEN: u32 = 257;
pub const IMAGE_TOKEN: u32 = 258;
/// First id available to vocab-file entries.
pub const FIRST_VOCAB_ID: u32 = 259;
pub const IMAGE_PLACEHOLDER: &str = "<image>";

/// Greedy-longest-match tokenizer over a loadable vocabulary with total
/// byte fallback.
#[derive(Debug, Clone, Default)]
pub struct Tokenizer {
    /// token string -> id, for the matcher.
    by_text: HashMap<Vec<u8>, u32>,
    /// id -> token string, for decoding.
    by_id: HashMap<u32, Vec<u8>>,
    max_token_len: usize,
}

impl Tokenizer {
    /// Tokenizer with no vocabulary: every byte becomes its fallback token.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, u32)>) -> Result<Self> {
        let mut tok = Self::default();
        for (text, id) in entries {
            if id < FIRST_VOCAB_ID {
                return Err(Error::Vocab {
                    reason: format!(
                        "token {text:?} id {id} collides with reserved ids (< {FIRST_VOCAB_ID})"
                    ),
                });
            }
            if text.is_empty() {
                return Err(Error::Vocab {
                    reason: format!("token for id {id} is empty"),
                });
            }
            let bytes = text.into_bytes();
            if tok.by_id.insert(id, bytes.clone()).is_some() {
                return Err(Error::Vocab {
                    reason: format!("duplicate id {id}"),
                });
            }
            if tok.by_text.insert(bytes.clone(), id).is_some() {
                return Err(Error::Vocab {
                    reason: format!("duplicate token {:?}", String::from_utf8_lossy(&bytes)),
                });
            }
            tok.max_token_len = tok.max_token_len.max(bytes.len());
        }
        Ok(tok)
    }

    /// Load a vocab file of UTF-8 lines `token<TAB>id`.
    pub fn from_vocab_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (token, id) = line.split_once('\t').ok_or_else(|| Error::Vocab {
                reason: format!("line {} has no tab separator", lineno + 1),
            })?;
            let id: u32 = id.parse().map_err(|_| Error::Vocab {
                reason: format!("line {} has a bad id {id:?}", lineno + 1),
            })?;
            entries.push((token.to_string(), id));
        }
        Self::from_entries(entries)
    }

    pub fn vocab_len(&self) -> usize {
        self.by_id.len()
    }

    /// Greedy longest-match against the vocabulary (the image placeholder
    /// matches as a unit); unmatched bytes emit their fallback token.
    pub fn tokenize(&self, s: &str) -> Vec<u32> {
        let bytes = s.as_bytes();
        let mut out = Vec::new();
        let mut pos = 0;
        let placeholder = IMAGE_PLACEHOLDER.as_bytes();
        while pos < bytes.len() {
            let rest = &bytes[pos..];
            let mut matched: Option<(usize, u32)> = None;
            let cap = self.max_token_len.max(placeholder.len()).min(rest.len());
            for len in (1..=cap).rev() {
                let candidate = &rest[..len];
                if candidate == placeholder {
                    matched = Some((len, IMAGE_TOKEN));
                    break;
                }
                if let Some(&id) = self.by_text.get(candidate) {
                    matched = Some((len, id));
                    break;
                }
            }
            match matched {
                Some((len, id)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    out.push(u32::from(bytes[pos]));
                    pos += 1;
                }
            }
        }
        out
    }

    /// Inverse mapping. Byte tokens contribute their raw byte, BOS/EOS
    /// contribute nothing, unknown ids above the reserved range render as
    /// nothing (they can only come from a model, not from [`Self::tokenize`]).
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            match id {
                0..=255 => bytes.push(id as u8),
                BOS_TOKEN | EOS_TOKEN => {}
                IMAGE_TOKEN => bytes.extend_from_slice(IMAGE_PLACEHOLDER.as_bytes()),
                other => {
                    if let Some(text) = self.by_id.get(&other) {
                        bytes.extend_from_slice(text);
                    }
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    pub mode: SampleMode,
    pub temperature: f32,
    pub top_k: usize,
    pub seed: u64,
    pub eos_token: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            mode: SampleMode::Greedy,
            temperature: 1.0,
            top_k: 40,
            seed: 0,
            eos_token: EOS_TOKEN,
        }
    }
}

impl GenerationParams {
    fn validate(&self) -> Result<()> {
        if self.mode == SampleMode::Sample {
            if !(self.temperature > 0.0) {
                return Err(Error::Prompt {
                    reason: format!("sampling temperature must be > 0, got {}", self.temperature),
                });
            }
            if self.top_k == 0 {
                return Err(Error::Prompt {
                    reason: "top_k must be >= 1".into(),
                });
            }
        }
        Ok(())
    }
}

/// A composed vision-language model with a validated dimension chain.
#[derive(Debug, Clone)]
pub struct Model {
    pub weights: ModelWeights,
}

impl Model {
    pub fn config(&self) -> ModelConfig {
        self.weights.config()
    }

    pub fn has_vision_path(&self) -> bool {
        self.weights.vision.is_some() && self.weights.projector.is_some()
    }

    /// Projected image token count for one image, when a vision path exists.
    pub fn image_token_count(&self) -> Result<usize> {
        let cfg = self.config();
        match (&cfg.vision, &cfg.projector) {
            (Some(v), Some(p)) => p.output_tokens(v.num_patches()),
            _ => Err(Error::NoVisionPath),
        }
    }
}

/// Validate the cross-module dimension chain at the config level:
/// encoder `D_v` -> projector input, projector output -> decoder `dim`.
pub fn validate_chain(
    decoder_cfg: &crate::decoder::DecoderConfig,
    vision_cfg: Option<&crate::vision::VisionConfig>,
    projector_spec: Option<&crate::projector::ProjectorSpec>,
) -> Result<()> {
    decoder_cfg.validate()?;
    match (vision_cfg, projector_spec) {
        (None, None) => Ok(()),
        (Some(v), Some(p)) => {
            v.validate()?;
            p.validate()?;
            if v.embed_dim != p.input_dim {
                return Err(Error::DimensionChain {
                    from_module: "vision encoder",
                    from_dim: v.embed_dim,
                    to_module: "projector",
                    to_dim: p.input_dim,
                });
            }
            if p.output_dim != decoder_cfg.dim {
                return Err(Error::DimensionChain {
                    from_module: "projector",
                    from_dim: p.output_dim,
                    to_module: "decoder",
                    to_dim: decoder_cfg.dim,
                });
            }
            // The projected grid must actually reduce: validate the token
            // geometry end to end.
            p.output_tokens(v.num_patches())?;
            Ok(())
        }
        (Some(_), None) => Err(Error::Prompt {
            reason: "vision encoder present without a projector".into(),
        }),
        (None, Some(_)) => Err(Error::Prompt {
            reason: "projector present without a vision encoder".into(),
        }),
    }
}

/// Compose a model, validating the full dimension chain at construction.
pub fn build_vlm(weights: ModelWeights) -> Result<Model> {
    let cfg = weights.config();
    validate_chain(&cfg.decoder, cfg.vision.as_ref(), cfg.projector.as_ref())?;
    Ok(Model { weights })
}

/// Raw per-phase timings of one `generate` call, for the bench harness.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct PhaseTimings {
    pub tokenize_s: f64,
    pub vision_s: f64,
    pub project_s: f64,
    pub eval_prompt_s: f64,
    pub sample_s: f64,
    pub eval_s: f64,
    pub wall_s: f64,
    /// Prompt positions fed to the decoder (projected image tokens + text).
    pub tks_in: usize,
    /// Generated tokens.
    pub tks_out: usize,
    /// Encoder patch count, when an image was processed.
    pub image_patches: Option<usize>,
    /// Projected image token count, 0 for text-only prompts.
    pub image_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub timings: PhaseTimings,
}

/// Build the prompt embedding matrix `[n, dim]`: text ids embedded through
/// the token table, with the projected image tokens spliced in at the
/// placeholder (or prepended when the prompt has none).
pub fn prompt_embeddings(
    model: &Model,
    tokenizer: &Tokenizer,
    image: Option<&Tensor>,
    prompt: &str,
) -> Result<Tensor> {
    let (embeddings, _) = prompt_embeddings_timed(model, tokenizer, image, prompt)?;
    Ok(embeddings)
}

fn prompt_embeddings_timed(
    model: &Model,
    tokenizer: &Tokenizer,
    image: Option<&Tensor>,
    prompt: &str,
) -> Result<(Tensor, PhaseTimings)> {
    let mut t = PhaseTimings::default();
    let clock = Instant::now();
    let ids = tokenizer.tokenize(prompt);
    t.tokenize_s = clock.elapsed().as_secs_f64();

    let placeholder_count = ids.iter().filter(|&&i| i == IMAGE_TOKEN).count();
    if placeholder_count > 1 {
        return Err(Error::Prompt {
            reason: format!("{placeholder_count} image placeholders in one prompt"),
        });
    }
    if placeholder_count == 1 && image.is_none() {
        return Err(Error::Prompt {
            reason: "prompt has an image placeholder but no image was supplied".into(),
        });
    }

    let weights = &model.weights;
    let image_tokens = match image {
        None => None,
        Some(img) => {
            let (vision_w, projector_w) = match (&weights.vision, &weights.projector) {
                (Some(v), Some(p)) => (v, p),
                _ => return Err(Error::NoVisionPath),
            };
            let clock = Instant::now();
            let f = vision::encode_image(img, vision_w)?;
            t.vision_s = clock.elapsed().as_secs_f64();
            t.image_patches = Some(f.rows());
            let clock = Instant::now();
            let h = projector::project(&f, projector_w)?;
            t.project_s = clock.elapsed().as_secs_f64();
            t.image_tokens = h.rows();
            Some(h)
        }
    };

    let embeddings = match image_tokens {
        None => decoder::embed_tokens(&ids, &weights.decoder)?,
        Some(h) => {
            if placeholder_count == 0 {
                // Image tokens first, then the text (H_v ; H_q).
                decoder::mixed_prompt_embed(&h, &ids, &weights.decoder)?
            } else {
                let at = ids.iter().position(|&i| i == IMAGE_TOKEN).unwrap();
                let dim = weights.decoder.config.dim;
                let mut data = Vec::new();
                if at > 0 {
                    data.extend_from_slice(
                        decoder::embed_tokens(&ids[..at], &weights.decoder)?.data(),
                    );
                }
                data.extend_from_slice(h.data());
                if at + 1 < ids.len() {
                    data.extend_from_slice(
                        decoder::embed_tokens(&ids[at + 1..], &weights.decoder)?.data(),
                    );
                }
                let n = data.len() / dim;
                Tensor::new(&[n, dim], data)?
            }
        }
    };
    t.tks_in = embeddings.rows();
    Ok((embeddings, t))
}

fn argmax_lowest_id(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    let mut best_v = logits[0];
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as u32
}

fn sample_top_k(logits: &[f32], temperature: f32, top_k: usize, rng: &mut SplitMix64) -> u32 {
    // Rank by value, ties toward the lower id for determinism.
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let k = top_k.min(order.len());
    let kept = &order[..k];
    let max = f64::from(logits[kept[0]]);
    let temp = f64::from(temperature);
    let weights: Vec<f64> = kept
        .iter()
        .map(|&i| ((f64::from(logits[i]) - max) / temp).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.next_f64() * total;
    for (&idx, &w) in kept.iter().zip(&weights) {
        draw -= w;
        if draw <= 0.0 {
            return idx as u32;
        }
    }
    kept[k - 1] as u32
}

/// Generate a response for an optional image and a text prompt.
///
/// Greedy mode takes the argmax at each step (ties to the lowest id);
/// sample mode draws from the temperature-scaled top-k distribution with the
/// seeded generator. Generation stops at `eos_token` or `max_new_tokens`.
pub fn generate(
    model: &Model,
    tokenizer: &Tokenizer,
    image: Option<&Tensor>,
    prompt: &str,
    params: &GenerationParams,
) -> Result<GenerateOutput> {
    params.validate()?;
    let wall = Instant::now();
    let (embeddings, mut timings) = prompt_embeddings_timed(model, tokenizer, image, prompt)?;
    let weights = &model.weights;
    let ctx = weights.decoder.config.context_length;

    // Refuse over-budget workloads before any decoding starts.
    let needed = timings.tks_in + params.max_new_tokens;
    if needed > ctx {
        return Err(Error::ContextOverflow {
            requested: needed,
            filled: 0,
            capacity: ctx,
        });
    }

    let mut cache = KvCache::new(&weights.decoder.config);
    let clock = Instant::now();
    let mut logits = decoder::forward(
        DecoderInput::Embeddings(&embeddings),
        &weights.decoder,
        &mut cache,
    )?;
    timings.eval_prompt_s = clock.elapsed().as_secs_f64();

    let mut rng = SplitMix64::new(params.seed);
    let mut generated = Vec::new();
    for _ in 0..params.max_new_tokens {
        let last = logits.row(logits.rows() - 1);
        let clock = Instant::now();
        let next = match params.mode {
            SampleMode::Greedy => argmax_lowest_id(last),
            SampleMode::Sample => sample_top_k(last, params.temperature, params.top_k, &mut rng),
        };
        timings.sample_s += clock.elapsed().as_secs_f64();
        generated.push(next);
        if next == params.eos_token {
            break;
        }
        let clock = Instant::now();
        logits = decoder::forward(DecoderInput::Tokens(&[next]), &weights.decoder, &mut cache)?;
        timings.eval_s += clock.elapsed().as_secs_f64();
    }

    timings.tks_out = generated.len();
    timings.wall_s = wall.elapsed().as_secs_f64();
    Ok(GenerateOutput {
        text: tokenizer.detokenize(&generated),
        token_ids: generated,
        timings,
    })
}
