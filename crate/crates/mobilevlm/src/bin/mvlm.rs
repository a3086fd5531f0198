//! Thin command-line front end: export a deterministic checkpoint, run one
//! generation, or benchmark a model. The library examples cover the API in
//! more depth.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use mobilevlm::bench::{measure, report_emit, ReportFormat, Workload};
use mobilevlm::pipeline::{build_vlm, generate, GenerationParams, SampleMode, Tokenizer};
use mobilevlm::quant::QuantMode;
use mobilevlm::weights::ModelConfig;
use mobilevlm::{checkpoint, Tensor};

#[derive(Parser)]
#[command(
    name = "mvlm",
    about = "Mobile-scale VLM inference engine and latency harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    #[value(name = "1.4b")]
    Mobilevlm1_4b,
    #[value(name = "2.7b")]
    Mobilevlm2_7b,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantArg {
    F32,
    Q8,
    Q4,
}

impl QuantArg {
    fn mode(self) -> Option<QuantMode> {
        match self {
            QuantArg::F32 => None,
            QuantArg::Q8 => Some(QuantMode::Q8),
            QuantArg::Q4 => Some(QuantMode::Q4),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize a deterministic model and write a checkpoint.
    Export {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long, value_enum, default_value = "f32")]
        quant: QuantArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a response for a prompt (and optionally an image).
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 32)]
        n_predict: usize,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        #[arg(long, default_value_t = 40)]
        top_k: usize,
        /// Vocab file of `token<TAB>id` lines; byte fallback covers the rest.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Measure latency and print the rate decomposition.
    Bench {
        #[arg(long)]
        model: PathBuf,
        /// Quantize a f32 checkpoint in memory before measuring.
        #[arg(long, value_enum)]
        quant: Option<QuantArg>,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        n_predict: usize,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
}

/// Raw-float image file: header `{H, W, C}` as little-endian u32, then
/// `H·W·C` little-endian f32 values.
fn load_raw_image(path: &PathBuf) -> Result<Tensor, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if bytes.len() < 12 {
        return Err(format!(
            "{}: too short for a raw image header",
            path.display()
        ));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let expected = 12 + 4 * h * w * c;
    if bytes.len() != expected {
        return Err(format!(
            "{}: {h}x{w}x{c} image wants {expected} bytes, file has {}",
            path.display(),
            bytes.len()
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(&[h, w, c], data).map_err(|e| e.to_string())
}

fn tokenizer_from(vocab: &Option<PathBuf>) -> Result<Tokenizer, String> {
    match vocab {
        None => Ok(Tokenizer::empty()),
        Some(path) => Tokenizer::from_vocab_file(path).map_err(|e| e.to_string()),
    }
}

fn main() {
    if let Ok(threads) = std::env::var("MVLM_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) => mobilevlm::set_threads(n),
            Err(_) => {
                eprintln!("MVLM_THREADS must be an integer, got {threads:?}");
                std::process::exit(2);
            }
        }
    }
    if let Err(msg) = run(Cli::parse()) {
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Export {
            seed,
            preset,
            quant,
            out,
        } => {
            let config = match preset {
                Preset::Toy => ModelConfig::toy(),
                Preset::Mobilevlm1_4b => ModelConfig::mobilevlm_1_4b(),
                Preset::Mobilevlm2_7b => ModelConfig::mobilevlm_2_7b(),
            };
            let mut weights = mobilevlm::init_random(&config, seed).map_err(|e| e.to_string())?;
            if let Some(mode) = quant.mode() {
                weights.quantize_in_place(mode).map_err(|e| e.to_string())?;
            }
            checkpoint::save(&weights, &out).map_err(|e| e.to_string())?;
            eprintln!(
                "wrote {} ({} bytes of weights, mode {})",
                out.display(),
                weights.storage_bytes(),
                weights.quant_mode_name()
            );
            Ok(())
        }

        Command::Run {
            model,
            image,
            prompt,
            n_predict,
            mode,
            seed,
            temperature,
            top_k,
            vocab,
        } => {
            let weights = checkpoint::load(&model).map_err(|e| e.to_string())?;
            let model = build_vlm(weights).map_err(|e| e.to_string())?;
            let tokenizer = tokenizer_from(&vocab)?;
            let image = image.as_ref().map(load_raw_image).transpose()?;
            let params = GenerationParams {
                max_new_tokens: n_predict,
                mode: match mode {
                    Mode::Greedy => SampleMode::Greedy,
                    Mode::Sample => SampleMode::Sample,
                },
                temperature,
                top_k,
                seed,
                ..Default::default()
            };
            let out = generate(&model, &tokenizer, image.as_ref(), &prompt, &params)
                .map_err(|e| e.to_string())?;

            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{}", out.text).map_err(|e| e.to_string())?;
            writeln!(stdout, "tokens: {:?}", out.token_ids).map_err(|e| e.to_string())?;
            // Timings go to stderr so stdout stays reproducible.
            eprintln!(
                "{}",
                serde_json::to_string(&out.timings).map_err(|e| e.to_string())?
            );
            Ok(())
        }

        Command::Bench {
            model,
            quant,
            prompt,
            image,
            n_predict,
            runs,
            warmup,
            format,
            vocab,
        } => {
            let load_clock = Instant::now();
            let mut weights = checkpoint::load(&model).map_err(|e| e.to_string())?;
            if let Some(arg) = quant {
                match (arg.mode(), weights.quant_mode()) {
                    (Some(want), None) => {
                        weights.quantize_in_place(want).map_err(|e| e.to_string())?;
                    }
                    (want, have) if want == have => {}
                    (want, have) => {
                        return Err(format!(
                            "checkpoint mode {} cannot serve --quant {}; export at the desired mode",
                            have.map_or("f32", |m| m.name()),
                            want.map_or("f32", |m| m.name()),
                        ));
                    }
                }
            }
            let model = build_vlm(weights).map_err(|e| e.to_string())?;
            let load_lm_s = load_clock.elapsed().as_secs_f64();

            let tokenizer = tokenizer_from(&vocab)?;
            let image = image.as_ref().map(load_raw_image).transpose()?;
            let workload = Workload {
                prompt,
                image,
                tks_out: n_predict,
            };
            let report = measure(&model, &tokenizer, &workload, runs, warmup, load_lm_s)
                .map_err(|e| e.to_string())?;
            let bytes = report_emit(
                &report,
                match format {
                    Format::Text => ReportFormat::Text,
                    Format::Json => ReportFormat::Json,
                },
            );
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| e.to_string())?;
            Ok(())
        }
    }
}
