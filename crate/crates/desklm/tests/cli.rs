//! End-to-end CLI checks: corpus tooling, a tiny training run, eval, diag,
//! EMA, and the documented exit codes.

mod common;

use std::path::Path;
use std::process::Command;

use desklm::data::write_shard;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_desklm"))
}

fn write_text(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn shard_dir(dir: &Path, seed: u64, docs: usize) -> std::path::PathBuf {
    let data = dir.join("data");
    std::fs::create_dir_all(&data).unwrap();
    for shard in common::synth_shards(seed, docs) {
        write_shard(&shard, &data.join(format!("{}.shard", shard.source_name))).unwrap();
    }
    data
}

const RUN_TOML: &str = r#"
seed = 7
data_dir = "DATA_DIR"
log_every = 5

[model]
d_model = 32
n_layers = 2
n_heads = 2
n_kv_heads = 1
head_dim = 16
ffn_dim = 64
vocab_size = 258
max_context = 64
qk_norm = true
gating = true
value_residual = true
ln_scaling = true

[[stage]]
name = "stable"
iterations = 10
batch_size = 2
context = 32
grad_accum = 2
checkpoint_every = 0

[stage.schedule]
kind = "wsd"
warmup_steps = 2
min_ratio = 0.1
peak_lr_muon = 0.0235
peak_lr_adamw = 0.007

[stage.mixture]
[stage.mixture.weights]
web = 2.0
code = 1.0
math = 1.0
"#;

#[test]
fn tokenize_train_eval_diag_ema_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = shard_dir(dir.path(), 31, 60);

    // train
    let cfg_path = write_text(
        dir.path(),
        "run.toml",
        &RUN_TOML.replace("DATA_DIR", data.to_str().unwrap()),
    );
    let out_dir = dir.path().join("run");
    let st = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(out_dir.join("metrics.jsonl").exists());
    assert!(out_dir.join("manifest.jsonl").exists());
    let ckpt = out_dir.join("ckpt_00000010.bin");
    assert!(ckpt.exists(), "stage-end checkpoint missing");

    // metrics lines have the fixed keys
    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["iter", "tokens", "loss", "zloss", "lr_muon", "lr_adamw", "grad_norm", "wall_ms"] {
        assert!(first.get(key).is_some(), "metrics record missing `{key}`");
    }

    // eval
    let out = bin()
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .args(["--batches", "2", "--context", "32", "--batch-size", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let line: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).lines().next().unwrap())
            .unwrap();
    assert!(line["loss"].as_f64().unwrap().is_finite());

    // diag
    let report = dir.path().join("diag.jsonl");
    let st = bin()
        .args(["diag", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--report")
        .arg(&report)
        .args(["--batches", "2", "--context", "32", "--batch-size", "2"])
        .status()
        .unwrap();
    assert!(st.success());
    let report_text = std::fs::read_to_string(&report).unwrap();
    let header: serde_json::Value =
        serde_json::from_str(report_text.lines().next().unwrap()).unwrap();
    assert_eq!(header["record"], "header");
    assert!(report_text.lines().count() > 10);

    // ema over the single checkpoint directory
    let ema_out = dir.path().join("ema.bin");
    let st = bin()
        .args(["ema", "--beta", "0.8", "--last", "10"])
        .arg(&out_dir)
        .arg("--out")
        .arg(&ema_out)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(ema_out.exists());
}

#[test]
fn bpe_train_and_tokenize_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let f1 = write_text(dir.path(), "a.txt", "the quick brown fox the quick brown fox");
    let f2 = write_text(dir.path(), "b.txt", "jumps over the lazy dog over the lazy dog");
    let merges = dir.path().join("merges.txt");
    let st = bin()
        .args(["bpe-train", "--vocab-size", "280", "--output"])
        .arg(&merges)
        .arg("--input")
        .arg(&f1)
        .arg("--input")
        .arg(&f2)
        .status()
        .unwrap();
    assert!(st.success());

    let shard_path = dir.path().join("corpus.shard");
    let st = bin()
        .args(["tokenize", "--output"])
        .arg(&shard_path)
        .arg("--bpe")
        .arg(&merges)
        .arg("--input")
        .arg(&f1)
        .arg("--input")
        .arg(&f2)
        .args(["--quality", "3.5"])
        .status()
        .unwrap();
    assert!(st.success());
    let shard = desklm::data::read_shard(&shard_path).unwrap();
    assert_eq!(shard.doc_count(), 2);
    assert_eq!(shard.vocab_size, 280);
    assert_eq!(shard.quality_scores[0], Some(3.5));
}

#[test]
fn config_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_text(dir.path(), "bad.toml", "seed = \"nope\"");
    let st = bin().args(["train", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn numeric_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = shard_dir(dir.path(), 32, 30);
    let toml = RUN_TOML
        .replace("DATA_DIR", data.to_str().unwrap())
        .replace("peak_lr_muon = 0.0235", "peak_lr_muon = 1e28")
        .replace("peak_lr_adamw = 0.007", "peak_lr_adamw = 1e28");
    let cfg = write_text(dir.path(), "explode.toml", &toml);
    let st = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
    assert!(
        dir.path().join("run").join("numeric_failure_dump.json").exists(),
        "diagnostic dump missing"
    );
}

#[test]
fn missing_shards_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("empty")).unwrap();
    let toml = RUN_TOML.replace("DATA_DIR", dir.path().join("empty").to_str().unwrap());
    let cfg = write_text(dir.path(), "run.toml", &toml);
    let st = bin().args(["train", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(st.code(), Some(2));
}
