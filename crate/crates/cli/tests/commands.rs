use std::path::Path;

use clap::Parser;
use weakalign_cli::{exit, run, Cli, CliError};
use weakalign_core::corpus::{read_pairs, read_texts};
use weakalign_core::train::read_metrics;

fn cli(args: &[&str]) -> Result<(), CliError> {
    let mut full = vec!["weakalign"];
    full.extend_from_slice(args);
    run(Cli::try_parse_from(full).expect("arguments parse"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_world(dir: &Path) {
    cli(&["synth-gen", "--out", p(dir), "--images", "24", "--heldout", "8", "--distractors", "30"]).unwrap();
}

fn small_corpus(dir: &Path, k: usize) {
    let k = k.to_string();
    cli(&[
        "build-corpus",
        "--images",
        p(&dir.join("images.jsonl")),
        "--texts",
        p(&dir.join("texts.jsonl")),
        "--k",
        &k,
        "--out",
        p(dir),
    ])
    .unwrap();
}

#[test]
fn build_corpus_writes_k_pairs_per_image_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    small_corpus(dir.path(), 10);
    let pairs = read_pairs(&dir.path().join("pairs.jsonl")).unwrap();
    assert_eq!(pairs.k, 10);
    assert_eq!(pairs.pairs.len(), 24 * 10);
    assert!(dir.path().join("skipped.csv").exists());
    let quality = std::fs::read_to_string(dir.path().join("link_quality.csv")).unwrap();
    assert!(quality.starts_with("metric,value\n"));
}

#[test]
fn build_corpus_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        small_world(d);
        small_corpus(d, 5);
    }
    let read = |d: &Path| std::fs::read(d.join("pairs.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn zero_k_and_bad_files_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    let images = dir.path().join("images.jsonl");
    let texts = dir.path().join("texts.jsonl");
    let e = cli(&["build-corpus", "--images", p(&images), "--texts", p(&texts), "--k", "0", "--out", p(dir.path())])
        .unwrap_err();
    assert_eq!(e.exit_code(), exit::VALIDATION);

    let broken = dir.path().join("broken.jsonl");
    let mut text = std::fs::read_to_string(&images).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&broken, text).unwrap();
    let e = cli(&["build-corpus", "--images", p(&broken), "--texts", p(&texts), "--out", p(dir.path())])
        .unwrap_err();
    assert_eq!(e.exit_code(), exit::VALIDATION);
    assert!(e.to_string().contains("line"), "{e}");
}

#[test]
fn hashed_provider_builds_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    cli(&[
        "build-corpus",
        "--images",
        p(&dir.path().join("images.jsonl")),
        "--texts",
        p(&dir.path().join("texts.jsonl")),
        "--provider",
        "hash",
        "--out",
        p(dir.path()),
    ])
    .unwrap();
    let pairs = read_pairs(&dir.path().join("pairs.jsonl")).unwrap();
    assert_eq!(pairs.pairs.len(), 24 * 5);
    assert!(pairs.provider.contains("hash"));
}

fn pretrain_args<'a>(data: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["pretrain", "--data", data, "--out", out, "--epochs", "2", "--batch-size", "16"];
    v.extend_from_slice(extra);
    v
}

#[test]
fn pretrain_writes_metrics_and_epoch_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    small_corpus(dir.path(), 2);
    let out = dir.path().join("run");
    cli(&pretrain_args(p(dir.path()), p(&out), &[])).unwrap();
    let rows = read_metrics(&out.join("metrics.csv")).unwrap();
    // 48 pairs in batches of 16 for two epochs.
    assert_eq!(rows.len(), 6);
    assert!(out.join("checkpoints/epoch-1/manifest.json").exists());
    assert!(out.join("checkpoints/epoch-2/manifest.json").exists());
    assert!(out.join("checkpoint/params.bin").exists());
    for r in rows.iter().filter(|r| r.epoch == 0) {
        assert!((r.total - (r.l_rt + r.l_rp + r.l_is)).abs() < 1e-6);
    }
}

#[test]
fn unweighted_arm_keeps_plain_sum_after_warmup() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    small_corpus(dir.path(), 2);
    let out = dir.path().join("run");
    cli(&pretrain_args(p(dir.path()), p(&out), &["--weighted-itm=false"])).unwrap();
    let rows = read_metrics(&out.join("metrics.csv")).unwrap();
    for r in &rows {
        assert_eq!(r.mean_w_itm, 1.0);
        assert!((r.total - (r.l_rt + r.l_rp + r.l_is)).abs() < 1e-6);
    }
}

#[test]
fn resume_with_different_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    small_corpus(dir.path(), 2);
    let out = dir.path().join("run");
    cli(&pretrain_args(p(dir.path()), p(&out), &["--stop-at-step", "2"])).unwrap();
    let ckpt = out.join("checkpoint");
    let e = cli(&pretrain_args(p(dir.path()), p(&out), &["--resume", p(&ckpt), "--lr", "0.5"])).unwrap_err();
    assert_eq!(e.exit_code(), exit::VALIDATION);
    assert!(e.to_string().contains("peak_lr"), "{e}");
}

#[test]
fn probe_reports_and_enforces_threshold() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    small_corpus(dir.path(), 1);
    let out = dir.path().join("run");
    cli(&pretrain_args(p(dir.path()), p(&out), &["--epochs", "1"])).unwrap();
    let ckpt = out.join("checkpoint");
    let heldout = dir.path().join("heldout");
    let report = dir.path().join("reports");
    for suite in ["itm", "grounding"] {
        cli(&["probe", "--checkpoint", p(&ckpt), "--suite", suite, "--data", p(&heldout), "--out", p(&report)])
            .unwrap();
        assert!(report.join(format!("probe-{suite}.json")).exists());
    }
    let e = cli(&[
        "probe", "--checkpoint", p(&ckpt), "--suite", "itm", "--data", p(&heldout), "--min-accuracy", "1.01",
    ])
    .unwrap_err();
    assert_eq!(e.exit_code(), exit::THRESHOLD);
}

#[test]
fn inspect_attention_dumps_every_word_region_layer() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    small_corpus(dir.path(), 1);
    let out = dir.path().join("run");
    cli(&pretrain_args(p(dir.path()), p(&out), &["--epochs", "1"])).unwrap();
    let dump = dir.path().join("attn");
    cli(&[
        "inspect-attention",
        "--checkpoint",
        p(&out.join("checkpoint")),
        "--data",
        p(&dir.path().join("heldout")),
        "--limit",
        "2",
        "--out",
        p(&dump),
    ])
    .unwrap();
    let texts = read_texts(&dir.path().join("heldout/texts.jsonl")).unwrap();
    let words: usize = texts.sentences().iter().take(2).map(|s| s.words.len()).sum();
    let mut r = csv::Reader::from_path(dump.join("attention.csv")).unwrap();
    let rows = r.records().count();
    // Two layers, six regions per image.
    assert_eq!(rows, words * 2 * 6);
}

#[test]
fn grad_check_flags_a_corrupted_gradient() {
    let e = cli(&["grad-check", "--samples", "4", "--vocab", "40", "--corrupt", "head.itm.weight"]).unwrap_err();
    assert_eq!(e.exit_code(), exit::THRESHOLD);
}

#[test]
fn unknown_preset_is_a_validation_error() {
    let e = cli(&["grad-check", "--config", "/nonexistent/preset.cfg"]).unwrap_err();
    assert_eq!(e.exit_code(), exit::VALIDATION);
}
