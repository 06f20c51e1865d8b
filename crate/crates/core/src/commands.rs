//! File-level pipeline steps behind the command-line subcommands. Each
//! returns a serialisable summary that the binary prints as JSON.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{dataset_stats, generate_corpus, parse_tagged_corpus, DatasetStats, NounTagSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, load_dataset, save_attention_dump, save_dataset, write_jsonl, EvalOptions, EvalReport};
use crate::exec::Execution;
use crate::reader::ReaderMode;
use crate::synth::{generate_synthetic_corpus, write_corpus, SynthConfig, SynthStats};
use crate::train::{load_checkpoint_with_vocab, save_checkpoint, train, Checkpoint, TrainConfig};
use crate::vocab::{build_vocab, EncodedSample, Vocabulary};

/// Name of the training log written inside the checkpoint directory.
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    pub samples_per_doc: usize,
    /// Part-of-speech tags counted as nouns; `None` uses the default set.
    pub noun_tags: Option<Vec<String>>,
    /// Where to write one JSON line per skipped document.
    pub skip_log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub documents: usize,
    pub samples: usize,
    pub skipped: usize,
}

pub fn generate(args: &GenerateArgs, exec: Execution) -> Result<GenerateSummary> {
    let docs = parse_tagged_corpus(&read_text(&args.input)?)?;
    let nouns = match &args.noun_tags {
        Some(tags) => NounTagSet::new(tags),
        None => NounTagSet::default(),
    };
    let corpus = generate_corpus(&docs, args.seed, args.samples_per_doc, &nouns, exec)?;
    save_dataset(&args.output, &corpus.samples)?;
    if let Some(path) = &args.skip_log {
        write_jsonl(path, &corpus.skipped)?;
    }
    Ok(GenerateSummary {
        documents: docs.len(),
        samples: corpus.samples.len(),
        skipped: corpus.skipped.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSummary {
    pub size: usize,
    pub shortlist: Option<usize>,
    pub samples: usize,
}

/// Builds a vocabulary over the documents and queries of every input file.
pub fn build_vocab_files(inputs: &[PathBuf], shortlist: Option<usize>, output: &Path) -> Result<VocabSummary> {
    if inputs.is_empty() {
        return Err(Error::Usage("build-vocab needs at least one input file".into()));
    }
    let mut samples = Vec::new();
    for path in inputs {
        samples.extend(load_dataset(path, true)?.samples);
    }
    let tokens = samples.iter().flat_map(|s| s.document.iter().chain(&s.query));
    let vocab = build_vocab(tokens, shortlist)?;
    vocab.save(output)?;
    Ok(VocabSummary {
        size: vocab.size(),
        shortlist: vocab.shortlist(),
        samples: samples.len(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub vocab: PathBuf,
    /// JSON training config; `None` uses the defaults.
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    /// Overrides the config seed when set.
    pub seed: Option<u64>,
    /// Overrides the config epoch count when set.
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_valid_accuracy: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains on files and writes the best checkpoint plus a JSON-lines log
/// to `args.out`. On divergence the best checkpoint so far is still
/// written before a numeric error is returned.
pub fn train_files(args: &TrainArgs, exec: Execution) -> Result<TrainSummary> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::from_json(&read_text(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    config.validate()?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let encode = |path: &Path| -> Result<Vec<EncodedSample>> {
        Ok(load_dataset(path, true)?.samples.iter().map(|s| vocab.encode_sample(s)).collect())
    };
    let train_set = encode(&args.train)?;
    let valid_set = encode(&args.valid)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let log_path = args.out.join(TRAIN_LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut log_error = None;
    let outcome = train(&config, vocab.size(), &train_set, &valid_set, exec, |entry| {
        if log_error.is_some() {
            return;
        }
        let line = serde_json::to_string(entry).expect("log entries serialise");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_error = Some(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(Error::io(&log_path, e));
    }

    let best_valid_accuracy = outcome
        .best_epoch
        .and_then(|b| outcome.log.iter().find(|l| l.epoch == b))
        .map(|l| l.valid_accuracy);
    let summary = TrainSummary {
        epochs_run: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        best_valid_accuracy,
        checkpoint: args.out.clone(),
        log: log_path,
    };
    let ckpt = Checkpoint {
        params: outcome.params,
        adam: outcome.adam,
        config,
        vocab,
        epoch: outcome.best_epoch,
    };
    save_checkpoint(&ckpt, &args.out)?;
    match outcome.aborted {
        Some(reason) => Err(Error::Numeric(reason)),
        None => Ok(summary),
    }
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Defaults to the mode the checkpoint was trained with.
    pub mode: Option<ReaderMode>,
    pub restrict_candidates: bool,
    pub dump_attention: Option<PathBuf>,
    /// Vocabulary to use instead of the one stored with the checkpoint.
    pub vocab: Option<PathBuf>,
    pub per_sample: bool,
    pub top_k: usize,
}

pub fn eval_files(args: &EvalArgs, exec: Execution) -> Result<EvalReport> {
    let ckpt = load_checkpoint_with_vocab(&args.checkpoint, args.vocab.as_deref())?;
    let data = load_dataset(&args.data, true)?;
    let opts = EvalOptions {
        mode: args.mode.unwrap_or(ckpt.config.mode),
        restrict_candidates: args.restrict_candidates,
        per_sample: args.per_sample,
        top_k: args.top_k,
        exec,
    };
    let dump = args.dump_attention.is_some();
    let (report, dumps) = evaluate(&ckpt.params, &ckpt.vocab, &data.samples, &dataset_name(&args.data), &opts, dump)?;
    if let Some(path) = &args.dump_attention {
        save_attention_dump(path, &dumps)?;
    }
    Ok(report)
}

pub fn synth(config: &SynthConfig, out: &Path) -> Result<SynthStats> {
    let corpus = generate_synthetic_corpus(config)?;
    write_corpus(&corpus, out)
}

pub fn stats_file(data: &Path) -> Result<DatasetStats> {
    dataset_stats(&load_dataset(data, true)?.samples)
}
