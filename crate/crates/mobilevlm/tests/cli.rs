//! End-to-end checks of the `mvlm` binary: export -> run -> bench, vocab
//! files, and the error paths a user will actually hit.

use std::path::Path;
use std::process::Command;

fn mvlm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvlm"))
}

fn export_toy(dir: &Path, quant: &str) -> std::path::PathBuf {
    let out = dir.join(format!("toy_{quant}.mvlm"));
    let status = mvlm()
        .args(["export", "--seed", "1", "--preset", "toy", "--quant", quant])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    out
}

#[test]
fn export_run_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let model = export_toy(dir.path(), "q4");

    let vocab = dir.path().join("vocab.txt");
    std::fs::write(&vocab, "What \t259\npicture\t260\n").unwrap();

    let run = mvlm()
        .args(["run", "--prompt", "What is this?", "--n-predict", "8"])
        .arg("--model")
        .arg(&model)
        .arg("--vocab")
        .arg(&vocab)
        .output()
        .unwrap();
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.contains("tokens: ["), "{stdout}");

    let bench = mvlm()
        .args(["bench", "--prompt", "Step 1:", "--n-predict", "8"])
        .args(["--runs", "2", "--warmup", "1", "--format", "json"])
        .arg("--model")
        .arg(&model)
        .output()
        .unwrap();
    assert!(
        bench.status.success(),
        "{}",
        String::from_utf8_lossy(&bench.stderr)
    );
    let report: mobilevlm::LatencyReport = serde_json::from_slice(&bench.stdout).unwrap();
    assert_eq!(report.mode, "q4");
    assert_eq!(report.tks_out, 8);
    assert!(report.closure_error() < 0.01);
    assert!(report.load_lm_s > 0.0);

    // Text format carries the table header.
    let text = mvlm()
        .args(["bench", "--prompt", "Step 1:", "--n-predict", "4"])
        .args(["--runs", "1", "--warmup", "0"])
        .arg("--model")
        .arg(&model)
        .output()
        .unwrap();
    let table = String::from_utf8(text.stdout).unwrap();
    for column in ["Sample", "Eval_prompt", "Eval", "Total"] {
        assert!(table.contains(column), "missing {column} in:\n{table}");
    }
}

#[test]
fn bench_quantizes_f32_checkpoints_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let model = export_toy(dir.path(), "f32");
    let out = mvlm()
        .args(["bench", "--prompt", "x", "--n-predict", "4"])
        .args([
            "--runs", "1", "--warmup", "0", "--quant", "q8", "--format", "json",
        ])
        .arg("--model")
        .arg(&model)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: mobilevlm::LatencyReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.mode, "q8");

    // A quantized checkpoint cannot serve a different quant mode.
    let q8_model = export_toy(dir.path(), "q8");
    let refused = mvlm()
        .args([
            "bench",
            "--prompt",
            "x",
            "--n-predict",
            "4",
            "--quant",
            "q4",
        ])
        .arg("--model")
        .arg(&q8_model)
        .output()
        .unwrap();
    assert!(!refused.status.success());
    let msg = String::from_utf8_lossy(&refused.stderr).to_string();
    assert!(msg.contains("q8") && msg.contains("q4"), "{msg}");
}

#[test]
fn corrupt_checkpoints_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let model = export_toy(dir.path(), "f32");
    let mut bytes = std::fs::read(&model).unwrap();
    bytes[0] = b'Z';
    let bad = dir.path().join("bad.mvlm");
    std::fs::write(&bad, &bytes).unwrap();

    let out = mvlm()
        .args(["run", "--prompt", "x"])
        .arg("--model")
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let msg = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(msg.contains("bad magic"), "{msg}");
}

#[test]
fn run_reads_raw_float_images() {
    let dir = tempfile::tempdir().unwrap();
    let model = export_toy(dir.path(), "f32");

    let image = dir.path().join("img.raw");
    let mut bytes = Vec::new();
    for d in [84u32, 84, 3] {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    bytes.resize(bytes.len() + 84 * 84 * 3 * 4, 0u8);
    std::fs::write(&image, &bytes).unwrap();

    let out = mvlm()
        .args(["run", "--prompt", "describe <image>", "--n-predict", "4"])
        .arg("--model")
        .arg(&model)
        .arg("--image")
        .arg(&image)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Truncated image files are refused with the offending byte counts.
    std::fs::write(&image, &bytes[..100]).unwrap();
    let refused = mvlm()
        .args(["run", "--prompt", "x", "--n-predict", "2"])
        .arg("--model")
        .arg(&model)
        .arg("--image")
        .arg(&image)
        .output()
        .unwrap();
    assert!(!refused.status.success());
}
