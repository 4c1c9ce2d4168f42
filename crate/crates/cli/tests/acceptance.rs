//! End-to-end acceptance suite. Runs every criterion, prints one line each and
//! exits nonzero if any fails. Built with `harness = false`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use weakalign_cli::{run, Cli, CliError};
use weakalign_core::aligner::{
    plan_rn_masks, BoundingBox, Link, MaskModality, Region, RegionSet, Span, WeakPair,
};
use weakalign_core::corpus::{generate_world, read_pairs, WorldSpec};
use weakalign_core::embedder::{embed_tag_query, retrieve_topk, BagOfWords, EmbeddingProvider, RetrievalIndex};
use weakalign_core::gradcheck::{grad_check, GradCheckOptions};
use weakalign_core::numkernel::{Graph, ParamStore, Tensor};
use weakalign_core::objectives::{itm_loss, mlm_loss, mrc_loss, p_mrtc_loss};
use weakalign_core::train::{read_metrics, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn cli(args: &[&str]) -> Result<(), CliError> {
    let mut full = vec!["weakalign", "--log", "warn"];
    full.extend_from_slice(args);
    run(Cli::try_parse_from(full).expect("arguments parse"))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("report exists")).expect("json")
}

fn world(dir: &Path, images: usize, heldout: usize, distractors: usize) {
    let (i, h, d) = (images.to_string(), heldout.to_string(), distractors.to_string());
    cli(&["synth-gen", "--out", s(dir), "--images", &i, "--heldout", &h, "--distractors", &d]).unwrap();
}

fn corpus(dir: &Path) {
    cli(&[
        "build-corpus",
        "--images",
        s(&dir.join("images.jsonl")),
        "--texts",
        s(&dir.join("texts.jsonl")),
        "--out",
        s(&dir.join("corpus")),
    ])
    .unwrap();
}

fn pretrain(data: &Path, out: &Path, extra: &[&str]) -> Result<(), CliError> {
    let pairs = data.join("corpus").join("pairs.jsonl");
    let mut args = vec!["pretrain", "--data", s(data), "--pairs", s(&pairs), "--out", s(out)];
    args.extend_from_slice(extra);
    cli(&args)
}

fn gradients() -> Outcome {
    let config = TrainConfig::toy().model_config(200, 16, 40);
    let report = grad_check(&config, &GradCheckOptions::default()).unwrap();
    let names: Vec<&str> = report.params.iter().map(|p| p.name.as_str()).collect();
    let mut unique = names.clone();
    unique.sort_unstable();
    unique.dedup();
    let listed = unique.len() == names.len() && names.len() == report.params.len();
    let fast = report.elapsed < Duration::from_secs(120);
    outcome(
        report.passes(1e-4) && fast && listed,
        format!(
            "max rel err {:.2e} over {} tensors in {:.1?}",
            report.max_rel_err,
            report.params.len(),
            report.elapsed
        ),
    )
}

/// Full sort by score descending then id ascending; the oracle for top-K.
fn brute_force(query: &[f32], ids: &[u64], embeddings: &[Vec<f32>], k: usize) -> Vec<(u64, f64)> {
    let mut all: Vec<(u64, f64)> = ids
        .iter()
        .zip(embeddings)
        .map(|(&id, e)| {
            let dot: f64 = e.iter().zip(query).map(|(&a, &b)| a as f64 * b as f64).sum();
            (id, dot + 0.0)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn retrieval() -> Outcome {
    let w = generate_world(&WorldSpec {
        num_images: 200,
        num_distractors: 1000,
        ..WorldSpec::default()
    })
    .unwrap();
    let provider = BagOfWords::new(&w.concepts);
    let pool: Vec<(u64, &str)> = w.train.texts.iter().map(|t| (t.id, t.text.as_str())).collect();
    let index = RetrievalIndex::build(&provider, pool.iter().copied()).unwrap();
    let mut hits = 0;
    for t in &w.train.truth {
        let image = w.train.images.iter().find(|i| i.id == t.image_id).unwrap();
        let query = embed_tag_query(&provider, &image.tags()).unwrap();
        let top = retrieve_topk(&query, &index, 5).unwrap();
        if top.iter().any(|h| h.id == t.text_id) {
            hits += 1;
        }
    }
    let recall = hits as f64 / w.train.truth.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let all_ids = index.ids().to_vec();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=60);
        let picked = sample(&mut rng, all_ids.len(), n).into_vec();
        let ids: Vec<u64> = picked.iter().map(|&i| all_ids[i]).collect();
        let embeddings: Vec<Vec<f32>> = picked.iter().map(|&i| index.embedding(i).to_vec()).collect();
        let sub = RetrievalIndex::from_embeddings(provider.name(), ids.clone(), embeddings.clone()).unwrap();
        let image = &w.train.images[rng.gen_range(0..w.train.images.len())];
        let query = embed_tag_query(&provider, &image.tags()).unwrap();
        let k = rng.gen_range(1..=n + 3);
        let got: Vec<(u64, f64)> = retrieve_topk(&query, &sub, k)
            .unwrap()
            .iter()
            .map(|h| (h.id, h.score))
            .collect();
        if got != brute_force(&query, &ids, &embeddings, k) {
            mismatches += 1;
        }
    }
    outcome(
        recall >= 0.95 && mismatches == 0,
        format!("recall@5 {recall:.3}, {mismatches}/1000 sub-instances differ from the oracle"),
    )
}

fn link_frequencies(pair: &WeakPair, regions: &RegionSet, rho: f64, plans: usize) -> (f64, bool) {
    let tokens: Vec<u32> = (0..40).collect();
    let mean = pair.links.iter().map(|l| l.score as f64).sum::<f64>() / pair.links.len() as f64;
    let expected: Vec<f64> = pair
        .links
        .iter()
        .map(|l| (rho * l.score as f64 / mean).min(1.0))
        .collect();
    let mut counts = vec![0usize; pair.links.len()];
    let mut one_modality = true;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..plans {
        let plan = plan_rn_masks(pair, &tokens, regions, rho, &mut rng).unwrap();
        for &i in &plan.selected_links {
            counts[i] += 1;
        }
        one_modality &= match plan.modality {
            MaskModality::Text => plan.regions.is_empty() && !plan.text.is_empty(),
            MaskModality::Vision => plan.text.is_empty() && !plan.regions.is_empty(),
            MaskModality::None | MaskModality::Both => false,
        };
    }
    let l1 = counts
        .iter()
        .zip(&expected)
        .map(|(&c, &p)| (c as f64 / plans as f64 - p).abs())
        .sum();
    (l1, one_modality)
}

fn regions(n: usize) -> RegionSet {
    RegionSet {
        id: 0,
        width: 640.0,
        height: 480.0,
        regions: (0..n)
            .map(|i| Region {
                feature: vec![0.0; 16],
                bbox: BoundingBox::new(10.0 * i as f32, 0.0, 10.0 * i as f32 + 8.0, 8.0),
                tag: format!("c{i}"),
                class_id: i as u32,
                confidence: 1.0,
            })
            .collect(),
    }
}

fn proportional_masking(dir: &Path) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut one_modality = true;
    let mut details = Vec::new();

    let example = WeakPair {
        image_id: 0,
        text_id: 0,
        rank: 1,
        score: 1.0,
        links: vec![
            Link { span: Span::new(0, 2), region: 0, score: 0.8 },
            Link { span: Span::new(3, 5), region: 1, score: 0.4 },
        ],
        label: 1,
    };
    let (l1, ok) = link_frequencies(&example, &regions(2), 0.15, 100_000);
    worst = worst.max(l1);
    one_modality &= ok;
    details.push(format!("0.8/0.4 example L1 {l1:.4}"));

    world(dir, 40, 4, 40);
    corpus(dir);
    let pairs = read_pairs(&dir.join("corpus").join("pairs.jsonl")).unwrap();
    let real = pairs
        .pairs
        .iter()
        .filter(|p| p.links.len() >= 3)
        .max_by(|a, b| {
            let spread = |p: &WeakPair| {
                let (lo, hi) = p.links.iter().fold((f32::MAX, f32::MIN), |(lo, hi), l| {
                    (lo.min(l.score), hi.max(l.score))
                });
                hi - lo
            };
            spread(a).total_cmp(&spread(b))
        })
        .expect("a pair with several links")
        .clone();
    let (l1, ok) = link_frequencies(&real, &regions(6), 0.15, 100_000);
    worst = worst.max(l1);
    one_modality &= ok;
    details.push(format!("corpus pair with {} links L1 {l1:.4}", real.links.len()));
    outcome(
        worst < 0.05 && one_modality,
        format!("{}; one modality per plan: {one_modality}", details.join(", ")),
    )
}

fn curriculum(dir: &Path) -> Outcome {
    let data = dir.join("world");
    world(&data, 48, 8, 40);
    corpus(&data);
    let out = dir.join("run");
    pretrain(&data, &out, &["--epochs", "3", "--batch-size", "16"]).unwrap();
    let rows = read_metrics(&out.join("metrics.csv")).unwrap();
    let mut worst: f64 = 0.0;
    for r in &rows {
        let expected = if r.epoch == 0 {
            r.l_rt + r.l_rp + r.l_is
        } else {
            r.l_rt + r.weighted_rp_is
        };
        worst = worst.max((r.total - expected).abs());
    }
    let both = rows.iter().any(|r| r.epoch == 0) && rows.iter().any(|r| r.epoch >= 1);
    outcome(
        worst <= 1e-6 && both,
        format!("{} rows, max |total - expected| {worst:.2e}", rows.len()),
    )
}

fn learnability(dir: &Path) -> (Outcome, Outcome) {
    let data = dir.join("world");
    world(&data, 500, 200, 1000);
    corpus(&data);
    let out = dir.join("run");
    let start = Instant::now();
    pretrain(&data, &out, &["--config", "toy", "--epochs", "5", "--batch-size", "32"]).unwrap();
    let elapsed = start.elapsed();
    let checkpoint = out.join("checkpoint");
    let accuracy = |suite: &str| {
        cli(&[
            "probe",
            "--checkpoint",
            s(&checkpoint),
            "--suite",
            suite,
            "--data",
            s(&data.join("heldout")),
            "--out",
            s(&out),
        ])
        .unwrap();
        read_json(&out.join(format!("probe-{suite}.json")))["accuracy"]
            .as_f64()
            .unwrap()
    };
    let itm = accuracy("itm");
    let grounding = accuracy("grounding");
    let fast = elapsed < Duration::from_secs(15 * 60);
    (
        outcome(
            itm >= 0.90 && fast,
            format!("held-out matching accuracy {itm:.3} (chance 0.5), trained in {elapsed:.1?}"),
        ),
        outcome(
            grounding >= 2.0 / 6.0,
            format!("grounding accuracy {grounding:.3} (chance {:.3})", 1.0 / 6.0),
        ),
    )
}

/// Reuses the 500-image world; each arm pairs every image with one caption.
fn ratio_trend(data: &Path, dir: &Path) -> Outcome {
    let out = dir.join("sweep");
    let result = cli(&[
        "ratio-sweep",
        "--data",
        s(data),
        "--ratios",
        "0,0.5,1",
        "--seeds",
        "0,1,2",
        "--require-trend",
        "--min-gain",
        "0.05",
        "--out",
        s(&out),
    ]);
    let trend = read_json(&out.join("ratio-trend.json"));
    let medians: Vec<String> = trend["medians"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| format!("{}:{:.3}", m[0], m[1].as_f64().unwrap()))
        .collect();
    outcome(
        result.is_ok() && trend["holds"].as_bool() == Some(true),
        format!(
            "medians {}, gain {:.3}",
            medians.join(" "),
            trend["gain"].as_f64().unwrap()
        ),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let data = dir.join("world");
    world(&data, 32, 4, 20);
    corpus(&data);
    let common = ["--epochs", "2", "--batch-size", "16"];
    let run_dir = |name: &str| -> PathBuf { dir.join(name) };
    pretrain(&data, &run_dir("a"), &common).unwrap();
    pretrain(&data, &run_dir("b"), &common).unwrap();

    let mut stopped: Vec<&str> = common.to_vec();
    stopped.extend(["--stop-at-step", "3"]);
    pretrain(&data, &run_dir("c"), &stopped).unwrap();
    let resume_from = run_dir("c").join("checkpoint");
    let mut resumed: Vec<&str> = common.to_vec();
    resumed.extend(["--resume", s(&resume_from)]);
    pretrain(&data, &run_dir("c"), &resumed).unwrap();

    let bytes = |name: &str, file: &str| std::fs::read(run_dir(name).join(file)).unwrap();
    let same_seed = bytes("a", "metrics.csv") == bytes("b", "metrics.csv");
    let resumed_metrics = bytes("a", "metrics.csv") == bytes("c", "metrics.csv");
    let params = |name: &str| std::fs::read(run_dir(name).join("checkpoint").join("params.bin")).unwrap();
    let resumed_params = params("a") == params("c");
    outcome(
        same_seed && resumed_metrics && resumed_params,
        format!(
            "same-seed metrics identical {same_seed}, resumed metrics identical {resumed_metrics}, resumed params identical {resumed_params}"
        ),
    )
}

fn uniform_losses() -> Outcome {
    let (v, c) = (200usize, 40usize);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let text = g.constant(Tensor::zeros(&[3, v]));
    let mlm = mlm_loss(&mut g, Some(text), &[0, 5, 199]).unwrap();
    let regions = g.constant(Tensor::zeros(&[2, c]));
    let mrc = mrc_loss(&mut g, Some(regions), &[1, 39]).unwrap();
    let phrase = g.constant(Tensor::zeros(&[2, v]));
    let p_mrtc = p_mrtc_loss(&mut g, Some(phrase), &[vec![3, 4, 5], vec![7]]).unwrap();
    let mut itm_err: f64 = 0.0;
    for y in [0, 1] {
        let score = g.constant(Tensor::zeros(&[1, 1]));
        let l = itm_loss(&mut g, score, y).unwrap();
        itm_err = itm_err.max((g.scalar(l) - std::f64::consts::LN_2).abs());
    }
    let errs = [
        (g.scalar(mlm) - (v as f64).ln()).abs(),
        (g.scalar(mrc) - (c as f64).ln()).abs(),
        (g.scalar(p_mrtc) - (v as f64).ln()).abs(),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst < 1e-5 && itm_err < 1e-7,
        format!("max error vs ln V / ln C {worst:.1e}, matching loss vs ln 2 {itm_err:.1e}"),
    )
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().unwrap();
    let sub = |name: &str| {
        let p = root.path().join(name);
        std::fs::create_dir_all(&p).unwrap();
        p
    };
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("criterion {n} [{tag}] {name}: {}", o.detail);
    };
    report(1, "gradient correctness", gradients());
    report(2, "retrieval recall", retrieval());
    report(3, "proportional masking", proportional_masking(&sub("masking")));
    report(4, "curriculum total", curriculum(&sub("curriculum")));
    let (itm, grounding) = learnability(&sub("learn"));
    report(5, "matching learnability", itm);
    report(6, "grounding emerges", grounding);
    report(
        7,
        "alignment-ratio trend",
        ratio_trend(&root.path().join("learn").join("world"), &sub("ratio")),
    );
    report(8, "determinism and resume", determinism(&sub("determinism")));
    report(9, "uniform-logit losses", uniform_losses());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
