use std::path::PathBuf;
use std::process::ExitCode;

use cas_reader::commands::{self, EvalArgs, GenerateArgs, TrainArgs};
use cas_reader::exec::Execution;
use cas_reader::synth::SynthConfig;
use cas_reader::{Error, ErrorClass, ReaderMode};
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cas-reader", version, about = "Consensus attention sum reader for cloze-style reading comprehension")]
struct Cli {
    /// Run per-sample work on one thread. Results are identical either way.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate cloze samples from a tagged corpus.
    Generate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        samples_per_doc: usize,
        /// Comma-separated tags that mark nouns.
        #[arg(long, value_delimiter = ',')]
        noun_tags: Option<Vec<String>>,
        /// JSON-lines record of documents that produced no samples.
        #[arg(long)]
        skip_log: Option<PathBuf>,
    },
    /// Build a vocabulary from sample files.
    BuildVocab {
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        /// Keep only the N most frequent words.
        #[arg(long)]
        shortlist: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a reader and write the best checkpoint.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// JSON training config. Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// sum, avg, max or as-baseline. Defaults to the training mode.
        #[arg(long)]
        mode: Option<ReaderMode>,
        #[arg(long)]
        restrict_candidates: bool,
        #[arg(long)]
        dump_attention: Option<PathBuf>,
        /// Use this vocabulary instead of the checkpoint's.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Include per-sample results with the top K words.
        #[arg(long)]
        per_sample: Option<usize>,
    },
    /// Write a synthetic train/valid/test corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        train_docs: Option<usize>,
        #[arg(long)]
        valid_docs: Option<usize>,
        #[arg(long)]
        test_docs: Option<usize>,
        #[arg(long)]
        doc_len: Option<usize>,
    },
    /// Print dataset statistics.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

fn run(cli: Cli) -> cas_reader::Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    match cli.command {
        Command::Generate { input, output, seed, samples_per_doc, noun_tags, skip_log } => {
            let args = GenerateArgs { input, output, seed, samples_per_doc, noun_tags, skip_log };
            print_json(json!(commands::generate(&args, exec)?));
        }
        Command::BuildVocab { input, shortlist, output } => {
            print_json(json!(commands::build_vocab_files(&input, shortlist, &output)?));
        }
        Command::Train { train, valid, vocab, config, out, seed, epochs } => {
            let args = TrainArgs { train, valid, vocab, config, out, seed, epochs };
            print_json(json!(commands::train_files(&args, exec)?));
        }
        Command::Eval { checkpoint, data, mode, restrict_candidates, dump_attention, vocab, per_sample } => {
            let args = EvalArgs {
                checkpoint,
                data,
                mode,
                restrict_candidates,
                dump_attention,
                vocab,
                per_sample: per_sample.is_some(),
                top_k: per_sample.unwrap_or(0),
            };
            print_json(json!(commands::eval_files(&args, exec)?));
        }
        Command::Synth { out, seed, vocab_size, train_docs, valid_docs, test_docs, doc_len } => {
            let d = SynthConfig::default();
            let config = SynthConfig {
                seed,
                vocab_size: vocab_size.unwrap_or(d.vocab_size),
                train_docs: train_docs.unwrap_or(d.train_docs),
                valid_docs: valid_docs.unwrap_or(d.valid_docs),
                test_docs: test_docs.unwrap_or(d.test_docs),
                doc_len: doc_len.unwrap_or(d.doc_len),
                ..d
            };
            print_json(json!(commands::synth(&config, &out)?));
        }
        Command::Stats { data } => print_json(json!(commands::stats_file(&data)?)),
    }
    Ok(())
}

fn fail(class: ErrorClass, message: &str) -> ExitCode {
    let line = json!({ "error": class.as_str(), "code": class.exit_code(), "message": message });
    eprintln!("{line}");
    ExitCode::from(class.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(ErrorClass::Usage, first.trim_start_matches("error: "));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.class(), &error_message(&e)),
    }
}

fn error_message(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}
