//! Build a toy vision-language model and generate text, greedy and sampled.
//!
//! ```bash
//! cargo run --example generate_text
//! ```

use mobilevlm::pipeline::{build_vlm, generate, GenerationParams, SampleMode, Tokenizer};
use mobilevlm::rng::SplitMix64;
use mobilevlm::weights::{init_random, ModelConfig};
use mobilevlm::Tensor;

fn main() -> mobilevlm::Result<()> {
    // Deterministic toy VLM: 84x84 encoder -> LDP 32->64 -> 2-block decoder.
    let model = build_vlm(init_random(&ModelConfig::toy(), 7)?)?;
    println!(
        "model: {} weight bytes, vision path: {}",
        model.weights.storage_bytes(),
        model.has_vision_path()
    );

    // A tiny vocabulary; everything else falls back to byte tokens.
    let tokenizer = Tokenizer::from_entries([
        ("picture".to_string(), 300u32),
        ("the ".to_string(), 301),
        ("What ".to_string(), 302),
    ])?;

    // Synthesize an input image (raw tensors stand in for decoded files).
    let mut rng = SplitMix64::new(42);
    let image = Tensor::new(
        &[84, 84, 3],
        (0..84 * 84 * 3)
            .map(|_| rng.next_range(-1.0, 1.0))
            .collect(),
    )?;

    let greedy = GenerationParams {
        max_new_tokens: 16,
        ..Default::default()
    };
    let out = generate(
        &model,
        &tokenizer,
        Some(&image),
        "What is in the picture?",
        &greedy,
    )?;
    println!("\ngreedy tokens : {:?}", out.token_ids);
    println!("greedy text   : {:?}", out.text);
    println!(
        "prompt positions: {} ({} projected image tokens)",
        out.timings.tks_in, out.timings.image_tokens
    );

    let sampled = GenerationParams {
        max_new_tokens: 16,
        mode: SampleMode::Sample,
        temperature: 0.8,
        top_k: 20,
        seed: 1234,
        ..Default::default()
    };
    let out = generate(
        &model,
        &tokenizer,
        Some(&image),
        "What is in the picture?",
        &sampled,
    )?;
    println!("\nsampled tokens: {:?}", out.token_ids);
    println!("sampled text  : {:?}", out.text);
    println!("(rerun: the same seed reproduces this sequence exactly)");
    Ok(())
}
