//! Drives the `nnwm` binary end to end on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

use nnwm::persistence::{load_key, load_model, save_model};
use nnwm::watermark::{KeyFamily, KeyMatrix};

const TINY: &str = r#"
seed = 3

[data.synth]
num_classes = 2
train_per_class = 30
test_per_class = 10
image_size = 8

[train]
epochs = 4
batch_size = 16
lr_drop_epochs = []

[arch]
input = { channels = 3, height = 8, width = 8 }
num_classes = 2
groups = [{ channels = 4 }, { channels = 6, convs = 2, residual = true }]

[embed]
bits = 8
layer = "conv2"
lambda = 0.05
"#;

fn nnwm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnwm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nnwm(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn keygen_writes_loadable_key() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["keygen", "--family", "random", "--bits", "64", "--dim", "576", "--seed", "7", "--out", "k.toml"]);
    let (key, layer) = load_key(dir.path().join("k.toml")).unwrap();
    assert_eq!(key, KeyMatrix::generate(KeyFamily::Random, 64, 576, 7).unwrap());
    assert_eq!(layer, "conv4");
}

#[test]
fn invalid_family_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = nnwm(dir.path(), &["keygen", "--family", "sparse", "--bits", "4", "--dim", "8"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage") || String::from_utf8_lossy(&out.stderr).contains("--help"));
}

#[test]
fn unknown_attack_kind_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!nnwm(dir.path(), &["attack", "shred"]).status.success());
}

#[test]
fn dataset_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(dir.path(), &["--out-dir", out, "dataset", "--classes", "4", "--seed", "1", "--train-per-class", "5", "--test-per-class", "2"]);
    }
    for f in ["train.nnwd", "test.nnwd"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn embed_is_deterministic_and_extractable() {
    let dir = tiny_dir();
    for out in ["r1", "r2"] {
        ok(dir.path(), &["--config", "tiny.toml", "--threads", "1", "--out-dir", out, "embed"]);
    }
    let a = std::fs::read(dir.path().join("r1/model.nnwm")).unwrap();
    let b = std::fs::read(dir.path().join("r2/model.nnwm")).unwrap();
    assert_eq!(a, b);
    for f in ["key.toml", "payload.toml", "record.csv", "report.txt"] {
        assert!(dir.path().join("r1").join(f).exists(), "{f}");
    }
    let record = std::fs::read_to_string(dir.path().join("r1/record.csv")).unwrap();
    assert_eq!(record.lines().count(), 5);

    let out = ok(
        dir.path(),
        &["extract", "--model", "r1/model.nnwm", "--key", "r1/key.toml", "--payload", "r1/payload.toml"],
    );
    assert!(out.contains("BER: 0.0000"), "{out}");
}

#[test]
fn flag_overrides_config_seed() {
    let dir = tiny_dir();
    ok(dir.path(), &["--config", "tiny.toml", "--seed", "5", "--out-dir", "o", "embed", "--epochs", "1"]);
    let (key, _) = load_key(dir.path().join("o/key.toml")).unwrap();
    assert_eq!(key.seed(), 5);
    ok(dir.path(), &["--config", "tiny.toml", "--out-dir", "p", "embed", "--epochs", "1"]);
    assert_eq!(load_key(dir.path().join("p/key.toml")).unwrap().0.seed(), 3);
}

#[test]
fn extraction_mismatch_and_copies() {
    let dir = tiny_dir();
    ok(dir.path(), &["--config", "tiny.toml", "--out-dir", "r", "embed", "--epochs", "1"]);
    ok(dir.path(), &["keygen", "--family", "diff", "--bits", "8", "--dim", "10", "--layer", "conv2", "--out", "wrong.toml"]);
    let out = nnwm(dir.path(), &["extract", "--model", "r/model.nnwm", "--key", "wrong.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("M = 10"));

    let model = load_model(dir.path().join("r/model.nnwm")).unwrap();
    save_model(&model, dir.path().join("copy.nnwm")).unwrap();
    let a = ok(dir.path(), &["extract", "--model", "r/model.nnwm", "--key", "r/key.toml"]);
    let b = ok(dir.path(), &["extract", "--model", "copy.nnwm", "--key", "r/key.toml"]);
    assert_eq!(a, b);
}

#[test]
fn overdetermined_payload_completes_and_is_flagged() {
    let dir = tiny_dir();
    // conv1 has M = 3 * 3 * 3 = 27.
    let out = ok(dir.path(), &["--config", "tiny.toml", "--out-dir", "o", "embed", "--layer", "conv1", "--bits", "60", "--epochs", "2"]);
    assert!(out.contains("overdetermined"), "{out}");
}

#[test]
fn attacks_write_their_outputs() {
    let dir = tiny_dir();
    ok(dir.path(), &["--config", "tiny.toml", "--out-dir", "r", "embed"]);
    let mark = ["--model", "r/model.nnwm", "--key", "r/key.toml", "--payload", "r/payload.toml"];
    let run = |kind: &str, extra: &[&str]| {
        let mut args = vec!["--config", "tiny.toml", "--out-dir", "a", "attack", kind];
        args.extend(mark);
        args.extend(extra);
        ok(dir.path(), &args)
    };
    run("prune", &["--rates", "0,0.25,0.5,0.75", "--orders", "ascending,descending,random"]);
    let csv = std::fs::read_to_string(dir.path().join("a/prune.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);

    run("finetune", &["--epochs", "1"]);
    assert!(dir.path().join("a/finetuned.nnwm").exists());

    let out = run("overwrite", &["--bits", "8,16", "--epochs", "1"]);
    assert_eq!(out.matches("original BER").count(), 2);
    let csv = std::fs::read_to_string(dir.path().join("a/overwrite.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    run("distill", &["--epochs", "1"]);
    assert!(dir.path().join("a/student.nnwm").exists());

    ok(dir.path(), &["--out-dir", "a", "report", "--model", "r/model.nnwm", "a/student.nnwm", "--key", "r/key.toml"]);
    let hist = std::fs::read_to_string(dir.path().join("a/histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 21);
}

#[test]
fn distill_to_embed_needs_a_source() {
    let dir = tiny_dir();
    let out = nnwm(dir.path(), &["--config", "tiny.toml", "embed", "--situation", "distill-to-embed"]);
    assert!(!out.status.success());
    ok(dir.path(), &["--config", "tiny.toml", "--out-dir", "t", "embed", "--epochs", "1"]);
    let out = ok(
        dir.path(),
        &["--config", "tiny.toml", "--out-dir", "d", "embed", "--situation", "distill-to-embed", "--source", "t/model.nnwm", "--epochs", "2"],
    );
    assert!(out.contains("distill-to-embed"));
}
