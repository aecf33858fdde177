use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clipsid::checkpoint::ModelKind;
use clipsid::Split;

mod commands;
mod config;
mod manifest;

#[derive(Parser)]
#[command(name = "clipsid", version, about = "Synthetic-image detection on frozen vision-language embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector and write a checkpoint, training log and run manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint per generator on one or more datasets.
    Eval(EvalArgs),
    /// Write contribution, vocabulary-ranking and concept reports.
    Interpret(InterpretArgs),
    /// Select a prompt pair on training data and evaluate it zero-shot.
    Zeroshot(ZeroshotArgs),
    /// Turn antonym poles into a direction vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Load and check dataset manifests and text-embedding files.
    ValidateData(ValidateArgs),
    /// Write a seeded synthetic dataset with a known signal.
    Planted(PlantedArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    OrthogonalHead,
    LinearProbe,
    Concept,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::OrthogonalHead => ModelKind::OrthogonalHead,
            KindArg::LinearProbe => ModelKind::LinearProbe,
            KindArg::Concept => ModelKind::Concept,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest; repeat to train on the pooled datasets.
    #[arg(long)]
    dataset: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    model_kind: Option<KindArg>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Concept vocabulary (concept model only).
    #[arg(long)]
    vocab: Vec<PathBuf>,
    /// Train k = 2, 4, 8, 16 into `<out>/k<k>/` and report test mAP per k.
    #[arg(long)]
    k_sweep: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest; repeat to evaluate on several datasets.
    #[arg(long, required = true)]
    dataset: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Concept vocabulary (concept checkpoints only).
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Restrict to these synthetic generators (repeatable).
    #[arg(long)]
    generator: Vec<String>,
}

#[derive(Args)]
struct InterpretArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Vocabulary to rank against the learned directions (repeatable); the
    /// concept vocabulary for concept checkpoints.
    #[arg(long)]
    vocab: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Terms kept per direction.
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Highest and lowest activating samples kept per direction.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Concepts kept in the concept report.
    #[arg(long, default_value_t = 30)]
    concepts: usize,
}

#[derive(Args)]
struct ZeroshotArgs {
    /// Dataset manifest to evaluate (repeatable).
    #[arg(long, required = true)]
    dataset: Vec<PathBuf>,
    /// Embedded prompt pairs.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset whose train split picks the prompt and threshold; defaults to
    /// the first --dataset.
    #[arg(long)]
    train_dataset: Option<PathBuf>,
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Antonym pole file (tensor with an `antonym_poles` sidecar).
    #[arg(long)]
    vocab: PathBuf,
    /// Output tensor path; the sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    dataset: Vec<PathBuf>,
    /// Text-embedding file of any kind (repeatable).
    #[arg(long)]
    vocab: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlantedKind {
    /// Two Gaussian classes, prompt pairs and antonym poles.
    Linear,
    /// Concept images with a plain concept vocabulary.
    Concept,
}

#[derive(Args)]
struct PlantedArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "linear")]
    kind: PlantedKind,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset name, also the manifest file stem.
    #[arg(long, default_value = "planted")]
    name: String,
    /// Synthetic generator names (repeatable).
    #[arg(long)]
    generator: Vec<String>,
    #[arg(long)]
    shuffle_labels: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Interpret(a) => commands::interpret(a),
        Command::Zeroshot(a) => commands::zeroshot(a),
        Command::BuildVocab(a) => commands::build_vocab(a),
        Command::ValidateData(a) => commands::validate_data(a),
        Command::Planted(a) => commands::planted(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
