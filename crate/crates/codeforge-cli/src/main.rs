//! `codeforge` — one binary for the whole pipeline: ingest corpora,
//! train codecs and models, search snippets, generate code, and score it.
//!
//! Exit codes: 0 on success, 1 on an operational error (a single-line
//! JSON object on stderr), 2 on usage errors.

mod commands;
mod manifest;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "codeforge",
    version,
    about = "Desk-scale machine learning on source code",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a CodeSearchNet JSONL corpus, filter one language, and write
    /// deterministic train/valid/test splits.
    Ingest(IngestArgs),
    /// Print corpus statistics as JSON.
    Stats(StatsArgs),
    /// Train or build a token codec.
    #[command(subcommand)]
    Tokenize(TokenizeCommand),
    /// Train a language model (character RNN or transformer).
    TrainLm(TrainLmArgs),
    /// Train a dual-encoder code-search model and build its snippet index.
    TrainSearch(TrainSearchArgs),
    /// Run the hyperparameter sweep grid with BLEU scoring.
    Sweep(SweepArgs),
    /// Generate code from a prompt with a trained LM.
    Generate(GenerateArgs),
    /// Query a snippet index.
    Search(SearchArgs),
    /// Evaluation metrics over a trained model.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Args)]
struct IngestArgs {
    /// Input JSONL corpus.
    #[arg(long)]
    input: PathBuf,
    /// Language to keep (e.g. python).
    #[arg(long)]
    language: String,
    /// Fraction of the corpus to retain before splitting, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    subset: f64,
    /// Split fractions train,valid,test summing to 1.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_fractions)]
    fractions: (f64, f64, f64),
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the split files and run manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
    /// Restrict to one language; omit to measure every record.
    #[arg(long)]
    language: Option<String>,
}

#[derive(Subcommand)]
enum TokenizeCommand {
    /// Train a byte-level BPE codec.
    TrainBpe(TrainBpeArgs),
    /// Collect the character vocabulary of a corpus.
    BuildChar(BuildCharArgs),
}

#[derive(Args)]
struct TrainBpeArgs {
    /// JSONL corpus or raw text file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    vocab_size: usize,
    /// Output codec manifest (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildCharArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Starter learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Per-epoch exponential decay factor.
    #[arg(long)]
    decay: Option<f64>,
    /// Gradient clip magnitude.
    #[arg(long)]
    clip: Option<f64>,
    /// element or global_norm.
    #[arg(long)]
    clip_mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// L2 regularization weight.
    #[arg(long)]
    reg: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    optimizer: Option<String>,
}

#[derive(Args)]
struct TrainLmArgs {
    /// Architecture: char or transformer.
    #[arg(long)]
    arch: String,
    /// Codec manifest; built from the training data when omitted.
    #[arg(long)]
    codec: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split directory from `ingest` (train.jsonl [+ valid.jsonl]) or a
    /// single JSONL file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Recurrent hidden size / transformer width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Layer count.
    #[arg(long)]
    layers: Option<usize>,
    /// Recurrent cell kind: lstm, gru, or rnn.
    #[arg(long)]
    cell: Option<String>,
    /// Transformer attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Transformer context length.
    #[arg(long)]
    context: Option<usize>,
    /// BPE vocab size when the codec is built on the fly.
    #[arg(long, default_value_t = 1000)]
    bpe_vocab_size: usize,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct TrainSearchArgs {
    /// Query encoder kind (nbow).
    #[arg(long, default_value = "nbow")]
    query_enc: String,
    /// Code encoder kind (nbow or rnn).
    #[arg(long, default_value = "nbow")]
    code_enc: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    output_dim: usize,
    /// GRU hidden size for the rnn encoder.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Word-vocabulary budget.
    #[arg(long, default_value_t = 4096)]
    vocab_size: usize,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct SweepArgs {
    /// Grid JSON: an array of {batch_size, starter_lr, reg_weight}.
    /// Omit to run the 12-point preset grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value = "lstm")]
    cell: String,
    /// Samples scored per BLEU metric.
    #[arg(long, default_value_t = 8)]
    max_eval_samples: usize,
    /// New tokens per generated candidate.
    #[arg(long, default_value_t = 128)]
    gen_tokens: usize,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct GenerateArgs {
    /// LM checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Prompt file: JSON {"signature", "docstring"} or plain text whose
    /// first line is the signature.
    #[arg(long)]
    prompt_file: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Sample from the k most likely tokens instead of greedy decoding.
    #[arg(long)]
    top_k: Option<usize>,
    /// Sample from the full distribution instead of greedy decoding.
    #[arg(long, default_value_t = false)]
    sample: bool,
    #[arg(long, default_value_t = 256)]
    max_new_tokens: usize,
    /// Stop condition: budget or dedent.
    #[arg(long, default_value = "dedent")]
    stop: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SearchArgs {
    /// Snippet index written by train-search.
    #[arg(long)]
    index: PathBuf,
    /// Natural-language query.
    #[arg(long)]
    query: String,
    #[arg(short = 'k', long, default_value_t = 5)]
    k: usize,
    /// Dual-encoder checkpoint; defaults to the one the index references.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Corpus BLEU of generated function bodies against true bodies.
    Bleu(EvalBleuArgs),
    /// n-gram novelty of generated bodies against the training corpus.
    Novelty(EvalNoveltyArgs),
    /// Perplexity over a JSONL corpus.
    Perplexity(EvalPerplexityArgs),
}

#[derive(Args)]
struct EvalBleuArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSONL samples to evaluate.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 32)]
    max_samples: usize,
    #[arg(long, default_value_t = 256)]
    max_new_tokens: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalNoveltyArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSONL samples prompting the generations.
    #[arg(long)]
    data: PathBuf,
    /// Training corpus JSONL the n-grams are checked against.
    #[arg(long)]
    train_data: PathBuf,
    #[arg(short = 'n', long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    max_samples: usize,
    #[arg(long, default_value_t = 128)]
    max_new_tokens: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalPerplexityArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 256)]
    max_samples: usize,
}

fn parse_fractions(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated fractions".into());
    }
    let mut vals = [0.0f64; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p.trim().parse().map_err(|e| format!("bad fraction {p:?}: {e}"))?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Ingest(args) => commands::ingest(args),
        Command::Stats(args) => commands::stats(args),
        Command::Tokenize(TokenizeCommand::TrainBpe(args)) => commands::train_bpe(args),
        Command::Tokenize(TokenizeCommand::BuildChar(args)) => commands::build_char(args),
        Command::TrainLm(args) => commands::train_lm(args),
        Command::TrainSearch(args) => commands::train_search(args),
        Command::Sweep(args) => commands::sweep(args),
        Command::Generate(args) => commands::generate_cmd(args),
        Command::Search(args) => commands::search(args),
        Command::Eval(EvalCommand::Bleu(args)) => commands::eval_bleu(args),
        Command::Eval(EvalCommand::Novelty(args)) => commands::eval_novelty(args),
        Command::Eval(EvalCommand::Perplexity(args)) => commands::eval_perplexity(args),
    };
    match outcome {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({ "error": err.to_string() });
            eprintln!("{line}");
            std::process::ExitCode::FAILURE
        }
    }
}
