//! Synthetic cloze corpus for desk-scale learning checks.
//!
//! The vocabulary is split into entities, cues and fillers. The query
//! announces the answer entity `e_i` by its cue `c_i` just before the
//! placeholder. Each document repeats the answer two or three more times
//! and repeats one filler word either equally often or once less, next to
//! a couple of single-mention entities; all other fillers are unique.
//! Counting alone therefore solves the unequal cases but only about half
//! of the ties, while a reader that has learnt which words can fill the
//! blank solves all of them.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{dataset_stats, DatasetStats};
use crate::error::{Error, Result};
use crate::eval::save_dataset;
use crate::sample::{ClozeSample, SampleMeta, PLACEHOLDER};

const SENTENCE_LEN: usize = 6;
const SINGLE_MENTIONS: usize = 2;
/// Most entity mentions outside the query sentence.
const MAX_BODY_MENTIONS: usize = 3 + 3 + SINGLE_MENTIONS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Distinct surface tokens, placeholder excluded. At least 20.
    pub vocab_size: usize,
    pub train_docs: usize,
    pub valid_docs: usize,
    pub test_docs: usize,
    /// Tokens per document. At least 10.
    pub doc_len: usize,
    /// Tokens in the query sentence, cue and placeholder included.
    pub query_len: usize,
    /// Entity types, each with its own cue token. At least 4.
    pub entities: usize,
    /// Probability that the distractor is as frequent as the answer.
    pub tie_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 50,
            train_docs: 200,
            valid_docs: 50,
            test_docs: 50,
            doc_len: 24,
            query_len: 6,
            entities: 10,
            tie_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCorpus {
    pub train: Vec<ClozeSample>,
    pub valid: Vec<ClozeSample>,
    pub test: Vec<ClozeSample>,
}

/// Per-split statistics recorded next to a generated corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthStats {
    pub train: DatasetStats,
    pub valid: DatasetStats,
    pub test: DatasetStats,
}

struct Lexicon {
    entities: usize,
    fillers: usize,
}

impl Lexicon {
    fn new(config: &SynthConfig) -> Result<Self> {
        if config.vocab_size < 20 || config.doc_len < 10 {
            return Err(Error::Config(format!(
                "synthetic corpus needs vocab_size >= 20 and doc_len >= 10 (got {} and {})",
                config.vocab_size, config.doc_len
            )));
        }
        if !(0.0..=1.0).contains(&config.tie_rate) {
            return Err(Error::Config(format!("tie_rate must be in [0, 1], got {}", config.tie_rate)));
        }
        let entities = config.entities;
        if entities < 4 || 2 * entities >= config.vocab_size {
            return Err(Error::Config(format!(
                "entities must be at least 4 and leave room for fillers (got {entities} of {})",
                config.vocab_size
            )));
        }
        if config.query_len < 2 || config.query_len + MAX_BODY_MENTIONS > config.doc_len {
            return Err(Error::Config(format!(
                "query_len must be at least 2 and leave {MAX_BODY_MENTIONS} tokens for mentions (got {} of {})",
                config.query_len, config.doc_len
            )));
        }
        let fillers = config.vocab_size - 2 * entities;
        // Fewest non-filler tokens: cue, blank, two answers, one distractor, singles.
        let min_mentions = 2 + 2 + 1 + SINGLE_MENTIONS;
        if fillers < config.doc_len - min_mentions {
            return Err(Error::Config(format!(
                "vocab_size {} cannot fill documents of {} tokens without repeating fillers",
                config.vocab_size, config.doc_len
            )));
        }
        Ok(Lexicon { entities, fillers })
    }
}

fn entity(i: usize) -> String {
    format!("e{i}")
}

fn cue(i: usize) -> String {
    format!("c{i}")
}

fn filler(i: usize) -> String {
    format!("w{i}")
}

fn document<R: Rng + ?Sized>(lex: &Lexicon, config: &SynthConfig, doc_id: String, rng: &mut R) -> ClozeSample {
    let answer = rng.random_range(0..lex.entities);
    let mut others: Vec<usize> = (0..lex.entities).filter(|&e| e != answer).collect();
    others.shuffle(rng);
    let residual = rng.random_range(2..=3);
    let distractor_count = if rng.random_bool(config.tie_rate) { residual } else { residual - 1 };

    let mut pool: Vec<usize> = (0..lex.fillers).collect();
    pool.shuffle(rng);
    let mut mentions: Vec<String> = Vec::new();
    mentions.extend(std::iter::repeat_n(entity(answer), residual));
    mentions.extend(std::iter::repeat_n(filler(pool[0]), distractor_count));
    mentions.extend(others[..SINGLE_MENTIONS].iter().map(|&e| entity(e)));

    let query_len = config.query_len;
    let body_len = config.doc_len - query_len;
    let fillers_needed = config.doc_len - mentions.len() - 2;
    let mut fillers = pool[1..=fillers_needed].iter().map(|&f| filler(f));

    // Query sentence: fillers around "cue ⟨X⟩".
    let slot = rng.random_range(1..query_len);
    let query: Vec<String> = (0..query_len)
        .map(|i| match i {
            _ if i == slot => PLACEHOLDER.to_string(),
            _ if i + 1 == slot => cue(answer),
            _ => fillers.next().expect("enough fillers"),
        })
        .collect();

    // The rest of the document: mentions scattered among fillers.
    let mut body: Vec<String> = mentions;
    body.extend(fillers.by_ref().take(body_len - body.len()));
    body.shuffle(rng);
    let query_sentence = rng.random_range(0..=body_len.div_ceil(SENTENCE_LEN));
    let insert_at = (query_sentence * SENTENCE_LEN).min(body.len());
    let mut doc = body[..insert_at].to_vec();
    doc.extend(query.iter().cloned());
    doc.extend(body[insert_at..].iter().cloned());

    ClozeSample {
        document: doc,
        query,
        answer: entity(answer),
        candidates: None,
        meta: Some(SampleMeta {
            doc_id,
            sentence: query_sentence,
            occurrence: slot,
        }),
    }
}

pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    let lex = Lexicon::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut split = |name: &str, n: usize| -> Vec<ClozeSample> {
        (0..n)
            .map(|i| document(&lex, config, format!("{name}-{i}"), &mut rng))
            .collect()
    };
    Ok(SynthCorpus {
        train: split("train", config.train_docs),
        valid: split("valid", config.valid_docs),
        test: split("test", config.test_docs),
    })
}

/// Most frequent document token, ties to the earliest first occurrence.
pub fn frequency_baseline(sample: &ClozeSample) -> Option<&str> {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for t in sample.document.iter().filter(|t| *t != PLACEHOLDER) {
        match counts.iter_mut().find(|(w, _)| *w == t) {
            Some((_, c)) => *c += 1,
            None => counts.push((t, 1)),
        }
    }
    let mut best: Option<(&str, usize)> = None;
    for (w, c) in counts {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((w, c));
        }
    }
    best.map(|(w, _)| w)
}

pub fn frequency_baseline_accuracy(samples: &[ClozeSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| frequency_baseline(s) == Some(s.answer.as_str()))
        .count();
    hits as f64 / samples.len() as f64
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];
pub const STATS_FILE: &str = "stats.json";

/// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and the recorded
/// statistics of each split to `dir`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<SynthStats> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, split) in SPLITS.iter().zip([&corpus.train, &corpus.valid, &corpus.test]) {
        save_dataset(&dir.join(format!("{name}.jsonl")), split)?;
    }
    let stats = SynthStats {
        train: dataset_stats(&corpus.train)?,
        valid: dataset_stats(&corpus.valid)?,
        test: dataset_stats(&corpus.test)?,
    };
    let path = dir.join(STATS_FILE);
    let text = serde_json::to_string_pretty(&stats).expect("stats serialise");
    std::fs::write(&path, format!("{text}\n")).map_err(|e| Error::io(path, e))?;
    Ok(stats)
}
