//! Latency harness and analytic FLOP accounting.
//!
//! A measured run decomposes as
//! `Total = Load_LM + Tks_in/Eval_prompt + Tks_out/Sample + Tks_out/Eval + Others`,
//! with `Sample` the token-selection rate, `Eval_prompt` the prompt-ingestion
//! rate, `Eval` the steady-state emission rate (timed only while the decoder
//! processes generated tokens), and `Others` the computed residual against
//! the wall clock. Medians over measured runs are reported; the harness
//! itself stays single-threaded.

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::pipeline::{generate, GenerationParams, Model, SampleMode, Tokenizer};
use crate::projector::{ProjectorSpec, Stage};
use crate::tensor::Tensor;
use crate::vision::VisionConfig;

/// The latency decomposition of one benchmarked configuration.
///
/// JSON serialization keeps exactly these field names; `ve_ms_per_patch`
/// is `null` for text-only workloads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyReport {
    pub load_lm_s: f64,
    pub sample_tps: f64,
    pub eval_prompt_tps: f64,
    pub eval_tps: f64,
    pub others_s: f64,
    pub total_s: f64,
    pub tks_in: u64,
    pub tks_out: u64,
    pub model_size_bytes: u64,
    pub mode: String,
    pub warmup_runs: u32,
    pub measured_runs: u32,
    pub ve_ms_per_patch: Option<f64>,
}

impl LatencyReport {
    /// Right-hand side of the decomposition, recomputed from the fields.
    pub fn decomposition_rhs(&self) -> f64 {
        self.load_lm_s
            + self.tks_in as f64 / self.eval_prompt_tps
            + self.tks_out as f64 / self.sample_tps
            + self.tks_out as f64 / self.eval_tps
            + self.others_s
    }

    /// Relative closure error of the decomposition identity.
    pub fn closure_error(&self) -> f64 {
        (self.total_s - self.decomposition_rhs()).abs() / self.total_s
    }
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub prompt: String,
    pub image: Option<Tensor>,
    pub tks_out: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Floor for phase durations so rates stay finite on degenerate runs.
const MIN_PHASE_S: f64 = 1e-9;

/// Run the workload `warmup + runs` times and report median rates.
///
/// `load_lm_s` is the caller-measured load time (file read plus structure
/// build); in-memory models pass 0. Workloads that cannot fit the context
/// are refused before any timing.
pub fn measure(
    model: &Model,
    tokenizer: &Tokenizer,
    workload: &Workload,
    runs: usize,
    warmup: usize,
    load_lm_s: f64,
) -> Result<LatencyReport> {
    if runs < 1 {
        return Err(Error::Bench {
            reason: "need at least one measured run".into(),
        });
    }
    if workload.tks_out < 1 {
        return Err(Error::Bench {
            reason: "workload must emit at least one token".into(),
        });
    }
    let params = GenerationParams {
        max_new_tokens: workload.tks_out,
        mode: SampleMode::Greedy,
        ..Default::default()
    };

    // Capacity pre-check so refusal happens before the warmup loop.
    let prompt_len = tokenizer.tokenize(&workload.prompt).len();
    let image_tokens = if workload.image.is_some() {
        model.image_token_count()?
    } else {
        0
    };
    let ctx = model.weights.decoder.config.context_length;
    let needed = prompt_len + image_tokens + workload.tks_out;
    if needed > ctx {
        return Err(Error::ContextOverflow {
            requested: needed,
            filled: 0,
            capacity: ctx,
        });
    }

    let mut sample_rates = Vec::with_capacity(runs);
    let mut eval_prompt_rates = Vec::with_capacity(runs);
    let mut eval_rates = Vec::with_capacity(runs);
    let mut walls = Vec::with_capacity(runs);
    let mut ve_ms = Vec::new();
    let mut tks_in = 0usize;
    let mut tks_out = 0usize;

    for i in 0..warmup + runs {
        let out = generate(
            model,
            tokenizer,
            workload.image.as_ref(),
            &workload.prompt,
            &params,
        )?;
        if i < warmup {
            continue;
        }
        let t = &out.timings;
        tks_in = t.tks_in;
        tks_out = t.tks_out;
        sample_rates.push(t.tks_out as f64 / t.sample_s.max(MIN_PHASE_S));
        eval_prompt_rates.push(t.tks_in as f64 / t.eval_prompt_s.max(MIN_PHASE_S));
        eval_rates.push(t.tks_out as f64 / t.eval_s.max(MIN_PHASE_S));
        walls.push(t.wall_s);
        if let Some(patches) = t.image_patches {
            ve_ms.push(t.vision_s * 1e3 / patches as f64);
        }
    }

    let sample_tps = median(&mut sample_rates);
    let eval_prompt_tps = median(&mut eval_prompt_rates);
    let eval_tps = median(&mut eval_rates);
    let wall = median(&mut walls);

    let total_s = load_lm_s + wall;
    let components =
        tks_in as f64 / eval_prompt_tps + tks_out as f64 / sample_tps + tks_out as f64 / eval_tps;
    let others_s = wall - components;

    Ok(LatencyReport {
        load_lm_s,
        sample_tps,
        eval_prompt_tps,
        eval_tps,
        others_s,
        total_s,
        tks_in: tks_in as u64,
        tks_out: tks_out as u64,
        model_size_bytes: model.weights.storage_bytes(),
        mode: model.weights.quant_mode_name().to_string(),
        warmup_runs: warmup as u32,
        measured_runs: runs as u32,
        ve_ms_per_patch: if ve_ms.is_empty() {
            None
        } else {
            Some(median(&mut ve_ms))
        },
    })
}

/// Decoder block FLOPs for a forward over `seq_len` positions, counted as
/// 2·MACs with the attention maps contributing `2·n²·d` per layer.
/// Embedding lookup and the LM head are excluded, so the count is exactly
/// linear in the block count.
pub fn decoder_flops(config: &DecoderConfig, seq_len: usize) -> u64 {
    let n = seq_len as u64;
    let d = config.dim as u64;
    let h = config.swiglu_hidden() as u64;
    let per_layer = 2 * (4 * n * d * d) + 2 * n * n * d + 2 * (3 * n * d * h);
    config.num_blocks as u64 * per_layer
}

/// Encoder FLOPs for one image: patch projection plus the transformer
/// blocks (attention as in [`decoder_flops`], 4x GELU MLP).
pub fn vision_encoder_flops(config: &VisionConfig) -> u64 {
    let n_v = config.num_patches() as u64;
    let n = config.seq_len() as u64;
    let d = config.embed_dim as u64;
    let patch_in = (config.patch_size * config.patch_size * config.channels) as u64;
    let patch = 2 * n_v * patch_in * d;
    let per_layer = 2 * (4 * n * d * d) + 2 * n * n * d + 2 * (2 * n * d * 4 * d);
    patch + config.num_layers as u64 * per_layer
}

/// Projector FLOPs for `n_v` input tokens: 2·MACs of every convolution at
/// the token count where it runs (stride-2 stages operate on the reduced
/// grid).
pub fn projector_flops(spec: &ProjectorSpec, n_v: usize) -> Result<u64> {
    spec.validate()?;
    spec.output_tokens(n_v)?;
    let mut tokens = n_v as u64;
    let mut total = 0u64;
    for (stage, (c_in, c_out)) in spec.stages.iter().zip(spec.stage_widths()) {
        let (c_in, c_out) = (c_in as u64, c_out as u64);
        match stage {
            Stage::Pointwise { .. } => {
                total += 2 * tokens * c_in * c_out;
            }
            Stage::DwPw { stride, .. } => {
                if *stride == 2 {
                    tokens /= 4;
                }
                let k = crate::projector::DW_KERNEL as u64;
                total += 2 * tokens * c_in * k * k;
                total += 2 * tokens * c_in * c_out;
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

/// Render a report. The text table mirrors the latency-table columns;
/// JSON round-trips through a strict parser with no NaN values.
pub fn report_emit(report: &LatencyReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut bytes = serde_json::to_vec_pretty(report).expect("report serializes");
            bytes.push(b'\n');
            bytes
        }
        ReportFormat::Text => {
            let mut s = String::new();
            s.push_str(&format!(
                "{:<6} {:>10} {:>14} {:>18} {:>12} {:>10}\n",
                "Mode", "Size (MB)", "Sample (t/s)", "Eval_prompt (t/s)", "Eval (t/s)", "Total (s)"
            ));
            s.push_str(&format!(
                "{:<6} {:>10.1} {:>14.1} {:>18.2} {:>12.2} {:>10.3}\n",
                report.mode,
                report.model_size_bytes as f64 / 1e6,
                report.sample_tps,
                report.eval_prompt_tps,
                report.eval_tps,
                report.total_s,
            ));
            s.push_str(&format!(
                "load_lm {:.3} s | others {:.3} s | tks_in {} | tks_out {} | runs {} (warmup {})",
                report.load_lm_s,
                report.others_s,
                report.tks_in,
                report.tks_out,
                report.measured_runs,
                report.warmup_runs,
            ));
            if let Some(ve) = report.ve_ms_per_patch {
                s.push_str(&format!(" | VE {ve:.3} ms/patch"));
            }
            s.push('\n');
            s.into_bytes()
        }
    }
}
