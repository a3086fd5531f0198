//! Run the ViT-style patch encoder and show the token arithmetic, including
//! the reduced-input-resolution variant.
//!
//! ```bash
//! cargo run --example encode_image
//! ```

use mobilevlm::rng::SplitMix64;
use mobilevlm::vision::{encode_image, rir_config, VisionConfig};
use mobilevlm::weights::init_vision;
use mobilevlm::Tensor;

fn random_image(cfg: &VisionConfig, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let n = cfg.image_size * cfg.image_size * cfg.channels;
    Tensor::new(
        &[cfg.image_size, cfg.image_size, cfg.channels],
        (0..n).map(|_| rng.next_range(-1.0, 1.0)).collect(),
    )
    .unwrap()
}

fn main() -> mobilevlm::Result<()> {
    // The full-scale preset: 336/14 -> 24x24 grid of 576 patch tokens.
    let clip = VisionConfig::clip_vit_l14_336();
    println!(
        "clip_vit_l14_336: grid {}x{} -> {} tokens of width {}",
        clip.grid_side(),
        clip.grid_side(),
        clip.num_patches(),
        clip.embed_dim
    );

    // Desk-scale encoder we can actually run here: 84/14 -> 36 tokens.
    let toy = VisionConfig::toy();
    let weights = init_vision(&toy, 3)?;
    let image = random_image(&toy, 4);
    let f = encode_image(&image, &weights)?;
    println!(
        "toy encoder: {}x{} image -> {:?} embeddings",
        toy.image_size,
        toy.image_size,
        f.shape()
    );

    // Halving the input resolution quarters the token count.
    let rir = rir_config(&toy, 2)?;
    let rir_weights = init_vision(&rir, 3)?;
    let small = random_image(&rir, 4);
    let f_rir = encode_image(&small, &rir_weights)?;
    println!(
        "rir variant: {}x{} image -> {:?} embeddings",
        rir.image_size,
        rir.image_size,
        f_rir.shape()
    );

    // Token count is a pure function of the config, never of the weights.
    for (name, cfg) in [("clip", &clip), ("toy", &toy), ("rir(toy)", &rir)] {
        println!(
            "{name:>9}: N_v = ({} / {})^2 = {}",
            cfg.image_size,
            cfg.patch_size,
            cfg.num_patches()
        );
    }
    Ok(())
}
