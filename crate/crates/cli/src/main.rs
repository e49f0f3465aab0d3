//! `lxlab`: one binary over the whole workflow, from raw corpus and
//! synthetic fixtures through pre-training, fine-tuning, prediction, and
//! report-shaped evaluation.
//!
//! Exit codes: 0 success, 1 bad invocation or config, 2 failure while
//! doing the work.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use lxlab_core::docmodel::DocError;
use lxlab_core::pipeline::PipelineError;
use lxlab_core::synth::SynthError;
use lxlab_core::tokenizer::TokenizerError;
use lxlab_core::train::TrainError;

/// Failures split by who got it wrong: a bad invocation exits 1, a
/// failure while doing the work exits 2.
#[derive(Debug)]
pub(crate) enum CliError {
    Usage(String),
    Run(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Run(m) => m,
        }
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub(crate) fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Run(msg.into())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Config { .. } => usage(e.to_string()),
            other => runtime(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> CliError {
        match e {
            SynthError::Spec { .. } => usage(e.to_string()),
            other => runtime(other.to_string()),
        }
    }
}

impl From<DocError> for CliError {
    fn from(e: DocError) -> CliError {
        runtime(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> CliError {
        runtime(e.to_string())
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> CliError {
        runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "lxlab", version, about = "Layout-aware multilingual document modeling workbench")]
pub(crate) struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
pub(crate) enum Cmd {
    /// Filter a raw JSONL corpus into per-language shards, or inspect one.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Inspect the temperature-flattened language mix.
    #[command(subcommand)]
    Sample(SampleCmd),
    /// Segment text with a unigram vocabulary.
    Tokenize(TokenizeArgs),
    /// Run the three-objective pre-training loop over corpus shards.
    Pretrain(TrainArgs),
    /// Fine-tune a task head on form datasets, evaluating each epoch.
    Finetune(FinetuneArgs),
    /// Label a dataset with a trained checkpoint.
    Predict(PredictArgs),
    /// Score a predicted dataset against gold annotations.
    Eval(EvalArgs),
    /// Generate a deterministic synthetic fixture tree.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
pub(crate) enum CorpusCmd {
    /// Split a JSONL corpus into per-language shard files plus stats.
    Build(CorpusBuildArgs),
    /// Print the kept/discarded tallies of a built shard directory.
    Stats(CorpusStatsArgs),
}

#[derive(Args)]
pub(crate) struct CorpusBuildArgs {
    /// Input corpus, one JSON record per line.
    #[arg(long)]
    pub(crate) input: PathBuf,
    /// Directory for shard files, stats.json, and the run snapshot.
    #[arg(long)]
    pub(crate) out: PathBuf,
}

#[derive(Args)]
pub(crate) struct CorpusStatsArgs {
    /// Directory produced by `corpus build`.
    #[arg(long)]
    pub(crate) dir: PathBuf,
}

#[derive(Subcommand)]
pub(crate) enum SampleCmd {
    /// Print per-label draw probabilities for given document counts.
    Probs(SampleProbsArgs),
}

#[derive(Args)]
pub(crate) struct SampleProbsArgs {
    /// Comma-separated LABEL=COUNT pairs, e.g. en=75,zh=25.
    #[arg(long)]
    pub(crate) counts: String,
    /// Flattening exponent; 1 keeps raw shares, 0 levels them out.
    #[arg(long, default_value_t = 0.7)]
    pub(crate) alpha: f64,
}

#[derive(Args)]
pub(crate) struct TokenizeArgs {
    /// Vocabulary TSV, one piece and logprob per line.
    #[arg(long)]
    pub(crate) vocab: PathBuf,
    /// Text to segment; each whitespace-separated word prints on its own line.
    #[arg(long)]
    pub(crate) text: String,
}

#[derive(Args)]
pub(crate) struct TrainArgs {
    /// Shard directory from `corpus build` for pre-training, or a
    /// dataset root with {lang}/train.json for fine-tuning.
    #[arg(long)]
    pub(crate) data: PathBuf,
    /// Vocabulary TSV.
    #[arg(long)]
    pub(crate) vocab: PathBuf,
    /// Output directory for the checkpoint, curves, and run snapshot.
    #[arg(long)]
    pub(crate) out: PathBuf,
    /// JSON config with flat keys (lr, steps, train_langs, ...).
    #[arg(long)]
    pub(crate) config: Option<PathBuf>,
    /// Override one config key, e.g. --set lr=0.004; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub(crate) set: Vec<String>,
    /// Continue a halted run from its checkpoint under the same config.
    #[arg(long)]
    pub(crate) resume: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct FinetuneArgs {
    #[command(flatten)]
    pub(crate) train: TrainArgs,
    /// Warm-start encoder weights from a pre-training checkpoint.
    #[arg(long)]
    pub(crate) init: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct PredictArgs {
    /// Fine-tuned checkpoint; its task decides what gets predicted.
    #[arg(long)]
    pub(crate) ckpt: PathBuf,
    /// Dataset JSON to label.
    #[arg(long)]
    pub(crate) data: PathBuf,
    /// Vocabulary TSV.
    #[arg(long)]
    pub(crate) vocab: PathBuf,
    /// Output directory for predictions.json and the run snapshot.
    #[arg(long)]
    pub(crate) out: PathBuf,
}

#[derive(Args)]
pub(crate) struct EvalArgs {
    /// Gold dataset JSON.
    #[arg(long)]
    pub(crate) gold: PathBuf,
    /// Predicted dataset JSON covering the same document ids.
    #[arg(long)]
    pub(crate) pred: PathBuf,
    /// Optional directory for eval.csv and the run snapshot.
    #[arg(long)]
    pub(crate) out: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct SynthArgs {
    /// Training documents per language.
    #[arg(long)]
    pub(crate) docs: usize,
    /// Test documents per language; defaults to a quarter of --docs.
    #[arg(long)]
    pub(crate) test_docs: Option<usize>,
    /// Plain corpus records per language; defaults to --docs.
    #[arg(long)]
    pub(crate) corpus_docs: Option<usize>,
    /// Comma-separated language codes, e.g. en,zh.
    #[arg(long, default_value = "en")]
    pub(crate) langs: String,
    /// Generation seed; the LXLAB_SEED variable supplies the default.
    #[arg(long)]
    pub(crate) seed: Option<u64>,
    /// Directory for the fixture tree.
    #[arg(long)]
    pub(crate) out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here as well; they are not errors
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Corpus(CorpusCmd::Build(a)) => commands::corpus_build(&a),
        Cmd::Corpus(CorpusCmd::Stats(a)) => commands::corpus_stats(&a),
        Cmd::Sample(SampleCmd::Probs(a)) => commands::sample_probs(&a),
        Cmd::Tokenize(a) => commands::tokenize(&a),
        Cmd::Pretrain(a) => commands::run_pretrain(&a),
        Cmd::Finetune(a) => commands::run_finetune(&a),
        Cmd::Predict(a) => commands::predict(&a),
        Cmd::Eval(a) => commands::eval(&a),
        Cmd::Synth(a) => commands::synth(&a),
    }
}
