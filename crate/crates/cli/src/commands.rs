use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use weakalign_core::aligner::{link_pairs, MaskPlan, Vocab};
use weakalign_core::corpus::{
    generate_world, load_checkpoint, read_images, read_pairs, read_texts, read_truth, write_pairs,
    write_world, PairFile, WorldSpec,
};
use weakalign_core::embedder::{build_weak_corpus, BagOfWords, EmbeddingProvider, HashedBagOfWords};
use weakalign_core::fusion::{attention_probe, FusedInput, FusionModel};
use weakalign_core::gradcheck::{self, GradCheckOptions, GradCheckReport};
use weakalign_core::probe::{grounding_probe, itm_probe, ProbeReport, ProbeSet};
use weakalign_core::train::{RunSummary, TrainConfig, Trainer, TrainingData};

use crate::{
    io_error, BuildCorpusArgs, CliError, GradCheckArgs, InspectArgs, PretrainArgs, ProbeArgs,
    Provider, Suite, SynthGenArgs, TrainArgs,
};

/// Loads the preset or file named by `--config` and applies the flag
/// overrides.
pub fn train_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut c = TrainConfig::load(&args.config)?;
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = args.lr {
        c.peak_lr = v;
    }
    if let Some(v) = args.warmup_epochs {
        c.warmup_epochs = v;
    }
    if let Some(v) = args.weighted_itm {
        c.weighted_itm = v;
    }
    if let Some(v) = args.schedule {
        c.schedule = v.into();
    }
    c.validate()?;
    Ok(c)
}

pub(crate) fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

fn write_json<R: Serialize>(path: &Path, value: &R) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

pub fn synth_gen(a: &SynthGenArgs) -> Result<(), CliError> {
    let spec = WorldSpec {
        num_concepts: a.concepts,
        feature_dim: a.feature_dim,
        noise_sigma: a.noise,
        concepts_per_image: (a.regions, a.regions),
        num_images: a.images,
        num_heldout: a.heldout,
        num_distractors: a.distractors,
        seed: a.seed,
        ..WorldSpec::default()
    };
    let world = generate_world(&spec)?;
    write_world(&a.out, &world)?;
    info!(
        "wrote {} training and {} held-out images to {}",
        world.train.images.len(),
        world.heldout.images.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SkipRow {
    image_id: u64,
    reason: String,
}

/// Writes `pairs.jsonl`, `skipped.csv` and `link_quality.csv` and returns the
/// pair file.
pub fn build_corpus(a: &BuildCorpusArgs) -> Result<PairFile, CliError> {
    if a.k < 1 {
        return Err(CliError::Validation("--k must be at least 1".into()));
    }
    let images = read_images(&a.images)?;
    let texts = read_texts(&a.texts)?;
    let sentences = texts.sentences();
    let provider: Box<dyn EmbeddingProvider> = match a.provider {
        Provider::Bow => {
            if texts.nouns.is_empty() {
                return Err(CliError::Validation(format!(
                    "{}: the bow provider needs a noun list in the header",
                    a.texts.display()
                )));
            }
            Box::new(BagOfWords::new(&texts.nouns))
        }
        Provider::Hash => {
            if a.hash_dim == 0 {
                return Err(CliError::Validation("--hash-dim must be positive".into()));
            }
            Box::new(HashedBagOfWords::new(a.hash_dim))
        }
    };
    let (mut pairs, skipped) = build_weak_corpus(&images.images, &sentences, provider.as_ref(), a.k)?;
    let links = link_pairs(&mut pairs, &images.images, &sentences, provider.as_ref())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let file = PairFile {
        k: a.k,
        provider: provider.name().to_string(),
        pairs,
    };
    write_pairs(&a.out.join("pairs.jsonl"), &file)?;
    let skip_rows: Vec<SkipRow> = skipped
        .skipped
        .iter()
        .map(|(id, reason)| SkipRow {
            image_id: *id,
            reason: reason.clone(),
        })
        .collect();
    write_csv(&a.out.join("skipped.csv"), &skip_rows)?;
    // An empty skip report still gets its header.
    if skip_rows.is_empty() {
        fs::write(a.out.join("skipped.csv"), "image_id,reason\n").map_err(|e| io_error(&a.out, e))?;
    }
    let quality = a.out.join("link_quality.csv");
    fs::write(&quality, links.to_csv()).map_err(|e| io_error(&quality, e))?;
    if !skipped.skipped.is_empty() {
        warn!("{} images skipped", skipped.skipped.len());
    }
    info!(
        "{} pairs (K = {}), phrase link coverage {:.3}",
        file.pairs.len(),
        a.k,
        links.coverage()
    );
    Ok(file)
}

/// Reads `images.jsonl` and `texts.jsonl` from `dir` plus a pair file.
pub fn load_training_data(dir: &Path, pairs: &Path, vocab: Option<Vocab>) -> Result<TrainingData, CliError> {
    let images = read_images(&dir.join("images.jsonl"))?;
    let texts = read_texts(&dir.join("texts.jsonl"))?;
    let pairs = read_pairs(pairs)?;
    Ok(TrainingData::new(
        images.images,
        texts.sentences(),
        pairs.pairs,
        images.feature_dim,
        images.classes.len(),
        vocab,
    )?)
}

/// Reads `images.jsonl`, `texts.jsonl` and `truth.jsonl` from `dir`.
pub fn load_probe_set(dir: &Path) -> Result<ProbeSet, CliError> {
    let images = read_images(&dir.join("images.jsonl"))?;
    let texts = read_texts(&dir.join("texts.jsonl"))?;
    let truth = read_truth(&dir.join("truth.jsonl"))?;
    let set = ProbeSet {
        images: images.images,
        sentences: texts.sentences(),
        truth,
    };
    set.validate()
        .map_err(|m| CliError::Validation(format!("{}: {m}", dir.display())))?;
    Ok(set)
}

pub fn pretrain(a: &PretrainArgs) -> Result<RunSummary, CliError> {
    let config = train_config(&a.train)?;
    let pairs = a.pairs.clone().unwrap_or_else(|| a.data.join("pairs.jsonl"));
    let checkpoint = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let vocab = checkpoint
        .as_ref()
        .map(|c| Vocab::from_tokens(c.manifest.vocab.clone()));
    let data = load_training_data(&a.data, &pairs, vocab)?;
    let mut trainer = match checkpoint {
        Some(c) => Trainer::resume(config, &data, c)?,
        None => Trainer::new(config, &data)?,
    };
    let summary = trainer.run(&a.out, a.stop_at_step)?;
    if let Some(row) = &summary.last {
        info!("step {} epoch {} total {:.4}", row.step, row.epoch, row.total);
    }
    Ok(summary)
}

fn load_model(dir: &Path) -> Result<(FusionModel<f32>, Vocab), CliError> {
    let c = load_checkpoint(dir)?;
    let vocab = Vocab::from_tokens(c.manifest.vocab.clone());
    let model = FusionModel::from_params(c.manifest.model.clone(), c.params)?;
    Ok((model, vocab))
}

pub fn probe(a: &ProbeArgs) -> Result<ProbeReport, CliError> {
    let (model, vocab) = load_model(&a.checkpoint)?;
    let set = load_probe_set(&a.data)?;
    let (name, report) = match a.suite {
        Suite::Itm => ("itm", itm_probe(&model, &vocab, &set, a.seed)?),
        Suite::Grounding => ("grounding", grounding_probe(&model, &vocab, &set)?),
    };
    println!(
        "{name}: {}/{} correct, accuracy {:.4} (chance {:.4})",
        report.correct, report.total, report.accuracy, report.chance
    );
    if let Some(out) = &a.out {
        write_json(&out.join(format!("probe-{name}.json")), &report)?;
    }
    if let Some(min) = a.min_accuracy {
        if report.accuracy < min {
            return Err(CliError::Threshold(format!(
                "{name} accuracy {:.4} below {min}",
                report.accuracy
            )));
        }
    }
    Ok(report)
}

pub fn grad_check(a: &GradCheckArgs) -> Result<GradCheckReport, CliError> {
    let config = TrainConfig::load(&a.config)?.model_config(a.vocab, a.feature_dim, a.classes);
    let opts = GradCheckOptions {
        samples_per_param: a.samples,
        seed: a.seed,
        corrupt: a.corrupt.clone(),
        ..GradCheckOptions::default()
    };
    let report = gradcheck::grad_check(&config, &opts)?;
    for p in &report.params {
        println!("{:<32} {:>3} coords  max rel err {:.3e}", p.name, p.checked, p.max_rel_err);
    }
    for (loss, err) in &report.losses {
        println!("loss {loss:<10} max rel err {err:.3e}");
    }
    println!(
        "max rel err {:.3e} over {} parameters in {:.1?}",
        report.max_rel_err,
        report.params.len(),
        report.elapsed
    );
    if let Some(out) = &a.out {
        write_csv(&out.join("grad-check.csv"), &report.params)?;
    }
    if !report.passes(a.tolerance) {
        return Err(CliError::Threshold(format!(
            "max relative error {:.3e} exceeds {:e}",
            report.max_rel_err, a.tolerance
        )));
    }
    Ok(report)
}

#[derive(Debug, Serialize)]
struct AttentionRow<'a> {
    image_id: u64,
    text_id: u64,
    layer: usize,
    position: usize,
    token: &'a str,
    region: usize,
    region_tag: &'a str,
    weight: f64,
}

/// Writes head-averaged attention from every word to every region, per
/// layer, for the first `limit` planted pairs.
pub fn inspect_attention(a: &InspectArgs) -> Result<(), CliError> {
    let (model, vocab) = load_model(&a.checkpoint)?;
    let set = load_probe_set(&a.data)?;
    let path: PathBuf = a.out.join("attention.csv");
    let mut rows = Vec::new();
    for t in set.truth.iter().take(a.limit) {
        let image = set.images.iter().find(|i| i.id == t.image_id).expect("validated");
        let sentence = set.sentences.iter().find(|s| s.id == t.text_id).expect("validated");
        let input = FusedInput::build(&sentence.token_ids(&vocab), image, &MaskPlan::empty())?;
        let maps = attention_probe(&model, &input)?;
        for layer in 0..maps.layers.len() {
            for (w, word) in sentence.words.iter().enumerate() {
                let scores = maps.text_to_regions(layer, &[input.word_position(w)]);
                for (r, &weight) in scores.iter().enumerate() {
                    rows.push(AttentionRow {
                        image_id: t.image_id,
                        text_id: t.text_id,
                        layer,
                        position: w,
                        token: word,
                        region: r,
                        region_tag: &image.regions[r].tag,
                        weight,
                    });
                }
            }
        }
    }
    write_csv(&path, &rows)?;
    info!("wrote {} attention rows to {}", rows.len(), path.display());
    Ok(())
}
