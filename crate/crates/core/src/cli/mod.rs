//! Command-line interface.
//!
//! Every command writes its results under `--out` together with a
//! `run_manifest.json`. Exit codes: 0 on success, 1 on usage errors, 2 on
//! data errors.

mod commands;
pub mod manifest;
pub mod presets;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;

use crate::ensemble::{Measure, Strategy};
use crate::error::Error;
use crate::metrics::AlphaLevel;
use crate::mlp::{Depth, FeatureMode, LayerPool};
use crate::model::TransformKind;
use crate::pipeline::FitScope;

pub use commands::{FeatureSpec, ThresholdFile};
pub use presets::Preset;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(Error::CodeParse { .. } | Error::InfeasibleStrategy(_)) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "disagree-kit",
    version,
    about = "Relatedness labels and disagreement scores from frozen embeddings"
)]
pub struct Cli {
    /// Seed for every stochastic stage; a fresh seed is drawn and recorded when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a Gaussian-judgment corpus and virtual-annotator stores.
    Simulate(SimulateArgs),
    /// Fit an anisotropy transform on a layer store.
    FitTransform(FitTransformArgs),
    /// Cosine relatedness score per usage pair.
    Score(ScoreArgs),
    /// Fit label thresholds on scores against gold median labels.
    FitThresholds(FitThresholdsArgs),
    /// Map scores to labels 1..=4 with fitted thresholds.
    PredictLabels(PredictLabelsArgs),
    /// Train an MLP classifier (task 1) or regressor (task 2).
    MlpTrain(MlpTrainArgs),
    /// Predict with a trained MLP.
    MlpPredict(MlpPredictArgs),
    /// Disagreement scores from an ensemble of virtual annotators.
    EnsemblePredict(EnsemblePredictArgs),
    /// Threshold-path alpha for every stored layer.
    SweepLayers(SweepLayersArgs),
    /// Threshold-path alpha for every layer and transform.
    SweepTransforms(SweepTransformsArgs),
    /// Compare STD, MPD and VR over sampled ensembles.
    SweepMeasures(SweepMeasuresArgs),
    /// Compare homo, hetero and mixed ensembling over sampled subsets.
    SweepStrategies(SweepStrategiesArgs),
    /// Score predictions: alpha for labels, Spearman for scores.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutArg {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct StoreArg {
    /// Root of the embedding stores.
    #[arg(long, env = "DISAGREE_KIT_STORE_ROOT")]
    pub store_root: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 200)]
    pub n_items: usize,
    #[arg(long, default_value_t = 1.0)]
    pub mu_min: f64,
    #[arg(long, default_value_t = 4.0)]
    pub mu_max: f64,
    #[arg(long, default_value_t = 0.0)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 0.8)]
    pub sigma_max: f64,
    #[arg(long, default_value_t = 10)]
    pub n_annotators: usize,
    /// Virtual annotators (one store each), at most 16.
    #[arg(long, default_value_t = 8)]
    pub n_virtual: usize,
    /// Dimension of the synthetic vectors.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Also write train.tsv (the first N items) and test.tsv (the rest).
    #[arg(long)]
    pub train_items: Option<usize>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitTransformArgs {
    /// Training corpus (its pairs are the fitting rows for --fit-on train).
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub store: StoreArg,
    /// Store model id (e.g. xlm-roberta-base) or model letter A-D.
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub layer: u32,
    #[arg(long)]
    pub transform: TransformKind,
    #[arg(long, default_value = "train")]
    pub fit_on: FitScope,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    /// Pairs to score.
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub store: StoreArg,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub layer: Option<u32>,
    /// Transform fitted on the training corpus (default none).
    #[arg(long, conflicts_with = "transform_file")]
    pub transform: Option<TransformKind>,
    /// Previously fitted transform (fit-transform output).
    #[arg(long)]
    pub transform_file: Option<PathBuf>,
    /// Corpus the transform is fitted on (default: --corpus).
    #[arg(long)]
    pub train_corpus: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    pub fit_on: FitScope,
    /// Per-language store and transform routing.
    #[arg(long, conflicts_with_all = ["model", "layer", "transform", "transform_file"])]
    pub preset: Option<Preset>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitThresholdsArgs {
    /// Corpus providing gold median labels.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Scores TSV (score output).
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, default_value = "ordinal")]
    pub level: AlphaLevel,
    /// Fit one threshold set per language.
    #[arg(long)]
    pub per_language: bool,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictLabelsArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// fit-thresholds output.
    #[arg(long)]
    pub thresholds: PathBuf,
    /// Corpus with language tags; required for per-language thresholds.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MlpTrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub store: StoreArg,
    /// 1 = label classifier, 2 = disagreement regressor.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub task: Option<u8>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub layer: Option<u32>,
    #[arg(long, default_value = "single")]
    pub pool: LayerPool,
    #[arg(long)]
    pub transform: Option<TransformKind>,
    #[arg(long, default_value = "train")]
    pub fit_on: FitScope,
    #[arg(long)]
    pub depth: Option<Depth>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long, default_value = "concat")]
    pub features: FeatureMode,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    /// Inverse-frequency class weights (classification only).
    #[arg(long)]
    pub weighted_loss: bool,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MlpPredictArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub store: StoreArg,
    /// Directory written by mlp-train (its `model` subdirectory).
    #[arg(long)]
    pub model_dir: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EnsembleArgs {
    /// Pairs to predict.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Corpus for fitting transforms and thresholds (default: --corpus).
    #[arg(long)]
    pub train_corpus: Option<PathBuf>,
    #[command(flatten)]
    pub store: StoreArg,
    #[arg(long, default_value = "train")]
    pub fit_on: FitScope,
    /// Candidate configurations as dashed codes (default: every code with a store).
    #[arg(long)]
    pub pool: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub subset_size: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EnsemblePredictArgs {
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    /// Dashed annotator codes, e.g. AjY-AiX-AjZ-AiW.
    #[arg(long, conflicts_with_all = ["preset", "strategy"])]
    pub configs: Option<String>,
    #[arg(long, conflicts_with = "strategy")]
    pub preset: Option<Preset>,
    /// Sample the subset from the pool with this strategy.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Index of the sampled subset.
    #[arg(long, default_value_t = 0)]
    pub sample: u64,
    #[arg(long, default_value = "std")]
    pub measure: Measure,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GridArgs {
    /// Pairs to evaluate.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Corpus for fitting transforms and thresholds (default: --corpus).
    #[arg(long)]
    pub train_corpus: Option<PathBuf>,
    #[command(flatten)]
    pub store: StoreArg,
    /// Store model ids or letters, comma separated.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "llama-7b,xlm-roberta-base,bert-multi-base,xlm-roberta-large"
    )]
    pub models: Vec<String>,
    #[arg(long, default_value = "train")]
    pub fit_on: FitScope,
    /// Also report alpha per language.
    #[arg(long)]
    pub per_language: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepLayersArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, default_value = "none")]
    pub transform: TransformKind,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepTransformsArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, value_delimiter = ',', default_value = "none,standardize,center,abtt")]
    pub transforms: Vec<TransformKind>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepMeasuresArgs {
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    #[arg(long, default_value = "mixed")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 50)]
    pub n_samples: usize,
    /// Truth table; correlate with true sigma instead of gold disagreement.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepStrategiesArgs {
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    #[arg(long, value_delimiter = ',', default_value = "homo,hetero,mixed")]
    pub strategies: Vec<Strategy>,
    #[arg(long, default_value_t = 500)]
    pub n_samples: usize,
    #[arg(long, default_value = "std")]
    pub measure: Measure,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub task: u8,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Corpus with gold labels and disagreement.
    #[arg(long)]
    pub gold: PathBuf,
    /// Truth table; task 2 is then scored against true sigma.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub per_language: bool,
    #[arg(long, default_value = "ordinal")]
    pub level: AlphaLevel,
    #[command(flatten)]
    pub out: OutArg,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    run_from(std::env::args_os())
}
