//! Walk the projector family: the downsampling LDP, the MLP baseline, and
//! the whole `[PW]xa [DW1PW]xb [DW2PW]xc` stacking grammar.
//!
//! ```bash
//! cargo run --example project_tokens
//! ```

use mobilevlm::projector::{ldp_spec, mlp_spec, param_count, project, table8_spec, StageOrder};
use mobilevlm::rng::SplitMix64;
use mobilevlm::weights::init_projector;
use mobilevlm::Tensor;

fn main() -> mobilevlm::Result<()> {
    // Full-scale shapes for the budget numbers.
    let ldp = ldp_spec(1024, 2048);
    let mlp = mlp_spec(1024, 2048);
    println!("LDP grammar : {}", ldp.to_grammar());
    println!("LDP params  : {:>10}", param_count(&ldp)?);
    println!("MLP params  : {:>10}", param_count(&mlp)?);
    println!("LDP tokens  : 576 -> {}", ldp.output_tokens(576)?);
    println!("MLP tokens  : 576 -> {}\n", mlp.output_tokens(576)?);

    // Every ablation row of the grammar, executed at toy width on a 24x24
    // grid so the token counts are the full-scale ones.
    let rows: [(usize, usize, usize, StageOrder); 5] = [
        (2, 0, 0, StageOrder::Stride1First),
        (0, 1, 1, StageOrder::Stride1First),
        (2, 1, 1, StageOrder::Stride1First),
        (2, 3, 1, StageOrder::Stride1First),
        (2, 1, 1, StageOrder::Stride2First),
    ];
    let mut rng = SplitMix64::new(5);
    let f = Tensor::new(
        &[576, 8],
        (0..576 * 8).map(|_| rng.next_range(-1.0, 1.0)).collect(),
    )?;
    for (i, (a, b, c, order)) in rows.into_iter().enumerate() {
        let spec = table8_spec(a, b, c, 8, 16, order)?;
        let weights = init_projector(&spec, 10 + i as u64)?;
        let h = project(&f, &weights)?;
        println!(
            "row {}: {:<24} -> {:>3} tokens ({} params at toy width)",
            i + 1,
            spec.to_grammar(),
            h.rows(),
            param_count(&spec)?
        );
    }

    // The grammar serializes for config files and CLI flags.
    let text = ldp_spec(8, 16).to_grammar();
    let parsed = mobilevlm::ProjectorSpec::parse(&text, 8, 16)?;
    println!("\nround-trip: {:?} -> {} stages", text, parsed.stages.len());
    Ok(())
}
