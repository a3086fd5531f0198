//! Initialize a deterministic model, write it to the checkpoint container,
//! load it back, and verify the round trip byte for byte. Also writes a
//! raw-float image usable with `mvlm run --image`.
//!
//! ```bash
//! cargo run --example export_checkpoint
//! ```

use mobilevlm::checkpoint::{load, save};
use mobilevlm::quant::QuantMode;
use mobilevlm::rng::SplitMix64;
use mobilevlm::weights::{init_random, ModelConfig};

fn main() -> mobilevlm::Result<()> {
    let dir = std::env::temp_dir().join("mvlm_export_example");
    std::fs::create_dir_all(&dir)?;

    for (mode, label) in [
        (None, "f32"),
        (Some(QuantMode::Q8), "q8"),
        (Some(QuantMode::Q4), "q4"),
    ] {
        let mut weights = init_random(&ModelConfig::toy(), 11)?;
        if let Some(m) = mode {
            weights.quantize_in_place(m)?;
        }
        let path = dir.join(format!("toy_{label}.mvlm"));
        save(&weights, &path)?;
        let on_disk = std::fs::metadata(&path)?.len();

        let loaded = load(&path)?;
        let second = dir.join(format!("toy_{label}_resaved.mvlm"));
        save(&loaded, &second)?;
        let identical = std::fs::read(&path)? == std::fs::read(&second)?;
        println!(
            "{label}: {} weight bytes, {} on disk, save->load->save bitwise identical: {identical}",
            weights.storage_bytes(),
            on_disk,
        );
        assert!(identical);
    }

    // Companion raw image: {H, W, C} u32 header, then f32 values, all LE.
    let image_path = dir.join("toy_image.raw");
    let mut rng = SplitMix64::new(99);
    let mut bytes = Vec::new();
    for d in [84u32, 84, 3] {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for _ in 0..84 * 84 * 3 {
        bytes.extend_from_slice(&rng.next_range(-1.0, 1.0).to_le_bytes());
    }
    std::fs::write(&image_path, &bytes)?;
    println!("\nwrote {}", image_path.display());
    println!(
        "try: mvlm run --model {} --image {} --prompt \"What is in the picture?\" --n-predict 16",
        dir.join("toy_q8.mvlm").display(),
        image_path.display()
    );
    Ok(())
}
