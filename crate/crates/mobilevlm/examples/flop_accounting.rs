//! Closed-form compute accounting: decoder, vision encoder, and projector
//! FLOPs at the preset shapes, and what the numbers say about where the
//! time goes.
//!
//! ```bash
//! cargo run --example flop_accounting
//! ```

use mobilevlm::bench::{decoder_flops, projector_flops, vision_encoder_flops};
use mobilevlm::decoder::count_parameters;
use mobilevlm::projector::{ldp_spec, mlp_spec, param_count};
use mobilevlm::vision::rir_config;
use mobilevlm::{DecoderConfig, VisionConfig};

fn main() -> mobilevlm::Result<()> {
    println!("decoder parameter counts:");
    for (name, cfg) in [
        ("MobileLLaMA 1.4B", DecoderConfig::mobilellama_1_4b()),
        ("MobileLLaMA 2.7B", DecoderConfig::mobilellama_2_7b()),
    ] {
        println!(
            "  {name}: {:>13} params, {:>7.2} GFLOPs per generated token",
            count_parameters(&cfg),
            decoder_flops(&cfg, 1) as f64 / 1e9
        );
    }

    let clip = VisionConfig::clip_vit_l14_336();
    let encoder = vision_encoder_flops(&clip);
    println!(
        "\nvision encoder (ViT-L/14 @ 336): {:.1} GFLOPs per image",
        encoder as f64 / 1e9
    );

    let ldp = ldp_spec(1024, 2048);
    let mlp = mlp_spec(1024, 2048);
    let ldp_f = projector_flops(&ldp, clip.num_patches())?;
    let mlp_f = projector_flops(&mlp, clip.num_patches())?;
    println!(
        "projector LDP: {:>6.2} GFLOPs, {:>10} params -> 144 tokens",
        ldp_f as f64 / 1e9,
        param_count(&ldp)?
    );
    println!(
        "projector MLP: {:>6.2} GFLOPs, {:>10} params -> 576 tokens",
        mlp_f as f64 / 1e9,
        param_count(&mlp)?
    );
    println!(
        "encoder / LDP compute ratio: {:.1}x (the projector is a rounding error next to the encoder)",
        encoder as f64 / ldp_f as f64
    );

    // Cutting tokens at the encoder instead: half the resolution, a quarter
    // of the tokens, and the encoder itself shrinks superlinearly.
    let rir = rir_config(&clip, 2)?;
    let rir_f = vision_encoder_flops(&rir);
    println!(
        "\nRIR at {}x{}: {} tokens, {:.1} GFLOPs ({:.1}% of the base encoder)",
        rir.image_size,
        rir.image_size,
        rir.num_patches(),
        rir_f as f64 / 1e9,
        100.0 * rir_f as f64 / encoder as f64
    );

    // Same 144-token budget either way; the decoder sees no difference.
    assert_eq!(ldp.output_tokens(clip.num_patches())?, rir.num_patches());
    println!("both routes feed the decoder exactly 144 visual tokens");
    Ok(())
}
