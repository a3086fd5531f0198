//! Group quantization at 8 and 4 bits: round-trip error against the scale
//! bound, storage accounting, and the fused matmul against its unfused twin.
//!
//! ```bash
//! cargo run --example quantize_weights
//! ```

use mobilevlm::quant::{
    dequantize, projected_storage_bytes, quantize, quantized_matmul, QuantMode, GROUP_SIZE,
};
use mobilevlm::rng::SplitMix64;
use mobilevlm::tensor::matmul;
use mobilevlm::Tensor;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.next_range(-1.0, 1.0)).collect()).unwrap()
}

fn main() -> mobilevlm::Result<()> {
    let w = random_tensor(&[64, 256], 1);

    for mode in [QuantMode::Q8, QuantMode::Q4] {
        let q = quantize(&w, mode)?;
        let d = dequantize(&q);

        // Per-element error never exceeds half the group scale.
        let mut worst_ratio = 0.0f64;
        let groups_per_row = q.padded_cols() / GROUP_SIZE;
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                let scale = f64::from(q.scales()[r * groups_per_row + c / GROUP_SIZE]);
                let err = f64::from((w.at(&[r, c]) - d.at(&[r, c])).abs());
                if scale > 0.0 {
                    worst_ratio = worst_ratio.max(err / (scale / 2.0));
                }
            }
        }
        println!(
            "{}: {} code bytes + {} scales = {} bytes ({:.2}x smaller than f32), worst err = {:.4} of scale/2",
            mode.name(),
            q.codes().len(),
            q.scales().len(),
            q.storage_bytes(),
            (w.len() * 4) as f64 / q.storage_bytes() as f64,
            worst_ratio
        );

        // Fused kernel vs. dequantize-then-matmul, relative to a floor of
        // 1% of the output magnitude.
        let x = random_tensor(&[4, 64], 2);
        let fused = quantized_matmul(&x, &q)?;
        let unfused = matmul(&x, &d)?;
        let rms = (unfused
            .data()
            .iter()
            .map(|v| f64::from(*v).powi(2))
            .sum::<f64>()
            / unfused.len() as f64)
            .sqrt();
        let max_rel = fused
            .data()
            .iter()
            .zip(unfused.data())
            .map(|(a, b)| f64::from((a - b).abs()) / f64::from(b.abs()).max(1e-2 * rms))
            .fold(0.0, f64::max);
        println!("    fused vs unfused matmul: max relative diff {max_rel:.2e}");
    }

    // Projected checkpoint sizes for the full-scale decoders.
    println!("\nprojected weight storage (GiB):");
    let gib = f64::from(1u32 << 30);
    for (name, cfg) in [
        ("1.4B", mobilevlm::DecoderConfig::mobilellama_1_4b()),
        ("2.7B", mobilevlm::DecoderConfig::mobilellama_2_7b()),
    ] {
        let params = mobilevlm::decoder::count_parameters(&cfg);
        println!(
            "  {name}: f32 {:>5.2}  q8 {:>5.2}  q4 {:>5.2}",
            projected_storage_bytes(params, None) as f64 / gib,
            projected_storage_bytes(params, Some(QuantMode::Q8)) as f64 / gib,
            projected_storage_bytes(params, Some(QuantMode::Q4)) as f64 / gib,
        );
    }
    Ok(())
}
