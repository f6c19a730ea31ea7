//! `embedalign` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, configuration or data error, 3 numerical
//! failure during training.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "embedalign", version, about = "Embeddings and word alignments from parallel text")]
struct Cli {
    /// Run every data-parallel loop on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic permutation-dictionary corpus with gold alignments.
    Synth(SynthArgs),
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override `model.hierarchical`.
        #[arg(long, action = ArgAction::Set)]
        hierarchical: Option<bool>,
    },
    /// Predict alignments for a parallel corpus.
    Align(AlignArgs),
    /// Compute an evaluation metric.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write type or sentence embeddings.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// L1 text, one sentence per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        mode: EmbedMode,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub v1: usize,
    #[arg(long)]
    pub v2: usize,
    #[arg(long)]
    pub pairs: usize,
    /// Sentence length range, inclusive.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    pub len: Vec<usize>,
    /// Shuffle L2 word order.
    #[arg(long)]
    pub shuffle: bool,
    /// Also write the last pairs as `valid/` and `test/` splits, with the
    /// remainder in `train/`.
    #[arg(long, default_value_t = 0)]
    pub valid_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub test_pairs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Ibm1,
    Nibm,
}

#[derive(clap::Args)]
pub struct AlignArgs {
    /// Trained model (required unless a baseline is chosen).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub l1: PathBuf,
    #[arg(long)]
    pub l2: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train a baseline on the input corpus instead of using a checkpoint.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// EM iterations for IBM1.
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    /// Training epochs for the neural IBM1.
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    /// Hidden width of the neural IBM1.
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write the IBM1 lexical table here.
    #[arg(long)]
    pub table_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LexSubMetric {
    Kl,
    KlReverse,
    Cosine,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Alignment error rate of predicted links against gold links.
    Aer {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Lexical substitution GAP.
    Lexsub {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = LexSubMetric::Kl)]
        metric: LexSubMetric,
    },
    /// Spearman correlation of type-embedding cosines with gold similarity.
    Wordsim {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// L1 text used to collect token contexts.
        #[arg(long)]
        corpus: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EmbedMode {
    Type,
    Sentence,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let exec = commands::execution(cli.sequential);
    let result = match cli.command {
        Command::Synth(args) => commands::synth(&args),
        Command::Train { config, hierarchical } => commands::train(&config, hierarchical, exec),
        Command::Align(args) => commands::align(&args, exec),
        Command::Eval(EvalCommand::Aer { pred, gold }) => commands::eval_aer(&pred, &gold, exec),
        Command::Eval(EvalCommand::Lexsub { checkpoint, input, metric }) => {
            commands::eval_lexsub(&checkpoint, &input, metric, exec)
        }
        Command::Eval(EvalCommand::Wordsim { checkpoint, input, corpus }) => {
            commands::eval_wordsim(&checkpoint, &input, &corpus)
        }
        Command::Embed { checkpoint, corpus, mode, out } => commands::embed(&checkpoint, &corpus, mode, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
