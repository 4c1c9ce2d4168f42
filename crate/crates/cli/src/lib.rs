//! Command-line entry points: world generation, weak-corpus construction,
//! pretraining, probes, gradient checking, attention dumps and the ablation
//! runners.
//!
//! Every command is a plain function over its parsed arguments so that the
//! integration tests can drive the binary's code paths in process.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use weakalign_core::corpus::CorpusError;
use weakalign_core::embedder::EmbedError;
use weakalign_core::fusion::FusionError;
use weakalign_core::gradcheck::GradCheckError;
use weakalign_core::objectives::Schedule;
use weakalign_core::train::TrainError;

mod commands;
mod sweeps;

pub use commands::{
    build_corpus, grad_check, inspect_attention, load_probe_set, load_training_data, pretrain,
    probe, synth_gen, train_config,
};
pub use sweeps::{k_sweep, ratio_sweep, witm_ablation, RatioRow, TrendCheck};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const RUNTIME: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const THRESHOLD: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, malformed input files or inconsistent checkpoints.
    #[error("{0}")]
    Validation(String),
    /// A check ran to completion and missed its threshold.
    #[error("{0}")]
    Threshold(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => exit::VALIDATION,
            CliError::Threshold(_) => exit::THRESHOLD,
            CliError::Runtime(_) => exit::RUNTIME,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { .. } | CorpusError::Kernel(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Corpus(c) => c.into(),
            TrainError::Config(_)
            | TrainError::ConfigMismatch(_)
            | TrainError::Data(_)
            | TrainError::Finished(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<GradCheckError> for CliError {
    fn from(e: GradCheckError) -> Self {
        match e {
            GradCheckError::UnknownParam(_) | GradCheckError::Fixture(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub(crate) fn io_error(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub const PRESETS_HELP: &str = "\
Presets (--config toy | paper-defaults, or a path to a key = value file):
  key               toy      paper-defaults
  layers            2        12
  hidden            64       768
  heads             4        12
  intermediate      256      3072
  init_std          0.2      0.02
  max_tokens        64       512
  max_regions       16       100
  batch_size        32       480
  epochs            5        20
  peak_lr           2e-3     6e-5
  warmup_fraction   0.1      0.1
  warmup_epochs     1        1
  weighted_itm      true     true
  mask_rate         0.15     0.15
  link_mask_rate    0.15     0.15
  itm_negative_prob 0.5      0.5
  schedule          sum      sum
  weight_decay      0        0
  seed              0        0
Command-line flags override preset values.";

#[derive(Debug, Parser)]
#[command(name = "weakalign", version, about = "Weakly-aligned vision-language pretraining toolkit")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted synthetic world with a held-out split.
    SynthGen(SynthGenArgs),
    /// Retrieve K captions per image and link noun phrases to regions.
    BuildCorpus(BuildCorpusArgs),
    /// Pretrain on a weak corpus with the multi-granular curriculum.
    #[command(after_help = PRESETS_HELP)]
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint on held-out data.
    Probe(ProbeArgs),
    /// Compare analytic gradients with finite differences in f64.
    #[command(after_help = PRESETS_HELP)]
    GradCheck(GradCheckArgs),
    /// Dump head-averaged text-to-region attention as CSV.
    InspectAttention(InspectArgs),
    /// Ablation: retrieval depth K.
    #[command(after_help = PRESETS_HELP)]
    KSweep(KSweepArgs),
    /// Ablation: fraction of correctly aligned pairs.
    #[command(after_help = PRESETS_HELP)]
    RatioSweep(RatioSweepArgs),
    /// Ablation: weighted versus unweighted matching curriculum.
    #[command(after_help = PRESETS_HELP)]
    WitmAblation(WitmArgs),
}

#[derive(Debug, Args, Clone)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training images.
    #[arg(long, default_value_t = 200)]
    pub images: usize,
    /// Held-out images, written under heldout/.
    #[arg(long, default_value_t = 100)]
    pub heldout: usize,
    /// Extra captions that describe no image.
    #[arg(long, default_value_t = 1000)]
    pub distractors: usize,
    #[arg(long, default_value_t = 40)]
    pub concepts: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    /// Standard deviation of region feature noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Concepts (regions) per image.
    #[arg(long, default_value_t = 6)]
    pub regions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Provider {
    /// Exact bag of words over the text file's noun list.
    Bow,
    /// Feature-hashed bag of words for open vocabularies.
    Hash,
}

#[derive(Debug, Args, Clone)]
pub struct BuildCorpusArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub texts: PathBuf,
    /// Captions retrieved per image.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = Provider::Bow)]
    pub provider: Provider,
    /// Dimension of the hashed provider.
    #[arg(long, default_value_t = 512)]
    pub hash_dim: usize,
    /// Writes pairs.jsonl, skipped.csv and link_quality.csv here.
    #[arg(long)]
    pub out: PathBuf,
}

/// Preset selection and per-run overrides.
#[derive(Debug, Args, Clone, Default)]
pub struct TrainArgs {
    /// Preset name or config file path.
    #[arg(long, default_value = "toy")]
    pub config: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs of plain summation before weighting starts [default: 1].
    #[arg(long)]
    pub warmup_epochs: Option<u64>,
    /// Weight region-phrase and image-sentence losses by the match score
    /// after warmup [default: true].
    #[arg(long, action = ArgAction::Set)]
    pub weighted_itm: Option<bool>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    /// All three granularities every step.
    Sum,
    /// One granularity per step in rotation.
    RoundRobin,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Sum => Schedule::Sum,
            ScheduleArg::RoundRobin => Schedule::RoundRobin,
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct PretrainArgs {
    /// Directory with images.jsonl and texts.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Pair file [default: <data>/pairs.jsonl].
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Writes metrics.csv, checkpoints/epoch-N and checkpoint here.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint directory; the configuration must match.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps.
    #[arg(long)]
    pub stop_at_step: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Own caption versus another image's caption.
    Itm,
    /// Attention argmax of each planted phrase versus its region.
    Grounding,
}

#[derive(Debug, Args, Clone)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// Directory with images.jsonl, texts.jsonl and truth.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Seed of the caption derangement in the matching probe.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Exit with code 3 below this accuracy.
    #[arg(long)]
    pub min_accuracy: Option<f64>,
    /// Writes probe-<suite>.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct GradCheckArgs {
    /// Preset name or config file path; supplies the model shape.
    #[arg(long, default_value = "toy")]
    pub config: String,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 200)]
    pub vocab: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 40)]
    pub classes: usize,
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes grad-check.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scale one parameter's analytic gradient (negative control).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory with images.jsonl, texts.jsonl and truth.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of image-caption pairs to dump.
    #[arg(long, default_value_t = 10)]
    pub limit: usize,
    /// Writes attention.csv here.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct KSweepArgs {
    /// World directory from synth-gen.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct RatioSweepArgs {
    /// World directory from synth-gen.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
    pub ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Exit with code 3 unless the median matching accuracy is
    /// non-decreasing in the ratio and the top ratio beats the bottom one
    /// by at least `--min-gain`.
    #[arg(long)]
    pub require_trend: bool,
    #[arg(long, default_value_t = 0.05)]
    pub min_gain: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct WitmArgs {
    /// World directory from synth-gen with pairs.jsonl from build-corpus.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthGen(a) => synth_gen(&a),
        Command::BuildCorpus(a) => build_corpus(&a).map(|_| ()),
        Command::Pretrain(a) => pretrain(&a).map(|_| ()),
        Command::Probe(a) => probe(&a).map(|_| ()),
        Command::GradCheck(a) => grad_check(&a).map(|_| ()),
        Command::InspectAttention(a) => inspect_attention(&a),
        Command::KSweep(a) => k_sweep(&a),
        Command::RatioSweep(a) => ratio_sweep(&a).map(|_| ()),
        Command::WitmAblation(a) => witm_ablation(&a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use weakalign_core::train::TrainConfig;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn presets_help_matches_preset_files() {
        let row = |key: &str| -> Vec<String> {
            let line = PRESETS_HELP
                .lines()
                .find(|l| l.split_whitespace().next() == Some(key))
                .unwrap_or_else(|| panic!("{key} missing from help"));
            line.split_whitespace().skip(1).map(str::to_string).collect()
        };
        for (i, c) in [TrainConfig::toy(), TrainConfig::paper()].iter().enumerate() {
            let text = c.to_text();
            for line in text.lines().filter(|l| l.contains('=')) {
                let (k, v) = line.split_once('=').unwrap();
                let v = v.trim().trim_matches('"');
                let shown = &row(k.trim())[i];
                let same = match (v.parse::<f64>(), shown.parse::<f64>()) {
                    (Ok(a), Ok(b)) => a == b,
                    _ => v == shown,
                };
                assert!(same, "{}: help says {shown}, preset has {v}", k.trim());
            }
        }
    }

    #[test]
    fn documented_defaults() {
        let cli = Cli::try_parse_from(["weakalign", "build-corpus", "--images", "i", "--texts", "t", "--out", "o"]).unwrap();
        match cli.command {
            Command::BuildCorpus(a) => {
                assert_eq!(a.k, 5);
                assert_eq!(a.provider, Provider::Bow);
            }
            _ => unreachable!(),
        }
        let cli = Cli::try_parse_from(["weakalign", "grad-check"]).unwrap();
        match cli.command {
            Command::GradCheck(a) => assert_eq!(a.tolerance, 1e-4),
            _ => unreachable!(),
        }
        let cli = Cli::try_parse_from([
            "weakalign", "pretrain", "--data", "d", "--out", "o", "--weighted-itm", "false",
        ])
        .unwrap();
        match cli.command {
            Command::Pretrain(a) => {
                assert_eq!(a.train.weighted_itm, Some(false));
                let c = train_config(&a.train).unwrap();
                assert!(!c.weighted_itm);
                assert_eq!(c.warmup_epochs, 1);
                assert_eq!(c.batch_size, 32);
            }
            _ => unreachable!(),
        }
    }
}
