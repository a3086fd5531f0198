//! Desk-scale CPU inference engine and latency harness for mobile-oriented
//! vision-language models: a ViT-style vision encoder, a downsampling
//! vision-to-language projector, a LLaMA-lineage decoder with KV-cache
//! incremental decoding, weight-only group quantization, and a latency
//! harness that reports the Sample / Eval_prompt / Eval / Total
//! decomposition.
//!
//! Start with the runnable examples (`cargo run --example generate_text`)
//! or the `mvlm` binary (`mvlm export`, `mvlm run`, `mvlm bench`).

pub mod bench;
pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod projector;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod vision;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;

pub use bench::{measure, LatencyReport, ReportFormat, Workload};
pub use decoder::{DecoderConfig, DecoderWeights, KvCache};
pub use pipeline::{build_vlm, generate, GenerateOutput, GenerationParams, Model, Tokenizer};
pub use projector::{ldp_spec, mlp_spec, table8_spec, ProjectorSpec, StageOrder};
pub use quant::{QuantMode, QuantizedTensor};
pub use vision::{encode_image, rir_config, VisionConfig, VisionWeights};
pub use weights::{init_random, ModelConfig, ModelWeights};

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Cap internal matmul parallelism. 1 (the default) keeps every kernel on
/// the calling thread, which is what the latency harness wants; values
/// above 1 let large matmuls fan out row-wise. Results are bitwise
/// identical at any setting. The `mvlm` binary wires this to the
/// `MVLM_THREADS` environment variable.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub(crate) fn thread_count() -> usize {
    THREADS.load(Ordering::Relaxed)
}
