//! Measure a toy model under f32, q8 and q4 and print the latency
//! decomposition in both the text table and JSON.
//!
//! ```bash
//! cargo run --example benchmark_latency
//! ```

use mobilevlm::bench::{measure, report_emit, ReportFormat, Workload};
use mobilevlm::pipeline::{build_vlm, Tokenizer};
use mobilevlm::quant::QuantMode;
use mobilevlm::weights::{init_random, ModelConfig};

fn main() -> mobilevlm::Result<()> {
    let tokenizer = Tokenizer::empty();
    let workload = Workload {
        prompt: "Building a website can be done in 10 simple steps:\nStep 1:".into(),
        image: None,
        tks_out: 32,
    };

    // A somewhat larger decoder so the rates mean something.
    let config = ModelConfig::decoder_only(mobilevlm::DecoderConfig {
        num_blocks: 4,
        dim: 256,
        num_heads: 8,
        context_length: 256,
        vocab_size: 512,
    });

    for mode in [None, Some(QuantMode::Q8), Some(QuantMode::Q4)] {
        let load_clock = std::time::Instant::now();
        let mut weights = init_random(&config, 1)?;
        if let Some(m) = mode {
            weights.quantize_in_place(m)?;
        }
        let model = build_vlm(weights)?;
        let load_lm_s = load_clock.elapsed().as_secs_f64();

        let report = measure(&model, &tokenizer, &workload, 3, 1, load_lm_s)?;
        print!(
            "{}",
            String::from_utf8_lossy(&report_emit(&report, ReportFormat::Text))
        );
        println!(
            "decomposition closes within {:.3}% of the wall clock\n",
            report.closure_error() * 100.0
        );
        if mode == Some(QuantMode::Q4) {
            println!("same report as JSON:");
            print!(
                "{}",
                String::from_utf8_lossy(&report_emit(&report, ReportFormat::Json))
            );
        }
    }
    Ok(())
}
