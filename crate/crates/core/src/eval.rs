//! Dataset I/O and accuracy evaluation.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::reader::{forward, predict, predict_from, AttentionMap, ModelParams, ReaderMode, SampleInput};
use crate::sample::ClozeSample;
use crate::vocab::{EncodedSample, Vocabulary};

/// Samples are evaluated in chunks of this size to bound memory.
const CHUNK: usize = 256;

/// A dataset line that failed to load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<ClozeSample>,
    /// Lines skipped in lenient mode.
    pub skipped: Vec<LineError>,
}

/// Reads a JSON-lines sample file. Blank lines are ignored. In strict mode
/// the first bad line aborts with its line number; otherwise bad lines are
/// skipped and reported.
pub fn load_dataset(path: &Path, strict: bool) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Dataset {
        samples: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<ClozeSample>(&line)
            .map_err(|e| Error::Parse {
                line: n,
                message: e.to_string(),
            })
            .and_then(|s| s.validate(n).map(|_| s));
        match parsed {
            Ok(s) => out.samples.push(s),
            Err(e) if strict => return Err(e),
            Err(e) => out.skipped.push(LineError {
                line: n,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, samples: &[ClozeSample]) -> Result<()> {
    write_jsonl(path, samples)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("records serialise");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub mode: ReaderMode,
    /// Predict only among each sample's candidate list, when it has one.
    pub restrict_candidates: bool,
    /// Include per-sample records with the `top_k` most probable words.
    pub per_sample: bool,
    pub top_k: usize,
    pub exec: Execution,
}

impl EvalOptions {
    pub fn new(mode: ReaderMode) -> Self {
        EvalOptions {
            mode,
            restrict_candidates: false,
            per_sample: false,
            top_k: 5,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub index: usize,
    pub predicted: String,
    pub gold: String,
    pub correct: bool,
    /// 1-based rank of the gold word under the prediction order; `None`
    /// when it is not a document word.
    pub gold_rank: Option<usize>,
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub mode: ReaderMode,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<SampleResult>>,
}

impl EvalReport {
    /// Report without per-sample records from aligned prediction and gold ids.
    pub fn from_predictions(dataset: &str, mode: ReaderMode, predicted: &[u32], gold: &[u32]) -> Result<Self> {
        if predicted.is_empty() || predicted.len() != gold.len() {
            return Err(Error::Usage(format!(
                "need one prediction per gold answer ({} vs {})",
                predicted.len(),
                gold.len()
            )));
        }
        let correct = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
        Ok(EvalReport {
            dataset: dataset.to_string(),
            mode,
            total: gold.len(),
            correct,
            accuracy: correct as f64 / gold.len() as f64,
            samples: None,
        })
    }
}

/// One line of an attention dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub sample: usize,
    pub document_ids: Vec<u32>,
    pub attention: AttentionMap,
}

/// Words ordered by descending probability, ties by ascending id, which
/// is the order [`predict`] uses.
fn ranking(map: &AttentionMap) -> Vec<(u32, f64)> {
    let mut words: Vec<(u32, f64)> = map.word_probs.iter().map(|(&k, &v)| (k, v)).collect();
    words.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    words
}

/// Runs the model over encoded samples in evaluation mode. `visit` sees
/// every sample index with its attention map and prediction, in order.
pub fn run_encoded(
    params: &ModelParams,
    samples: &[EncodedSample],
    opts: &EvalOptions,
    mut visit: impl FnMut(usize, &AttentionMap, u32) -> Result<()>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let masks: Vec<(Vec<bool>, Vec<bool>)> = samples
        .iter()
        .map(|s| (vec![true; s.doc.len()], vec![true; s.query.len()]))
        .collect();
    for (c, chunk) in samples.chunks(CHUNK).enumerate() {
        let base = c * CHUNK;
        let inputs: Vec<SampleInput> = chunk
            .iter()
            .enumerate()
            .map(|(i, s)| SampleInput::new(&s.doc, &s.query, &masks[base + i].0, &masks[base + i].1))
            .collect();
        let maps = forward(params, opts.mode, &inputs, opts.exec)?;
        for (i, (s, map)) in chunk.iter().zip(&maps).enumerate() {
            let predicted = match (&s.candidates, opts.restrict_candidates) {
                (Some(c), true) => predict_from(map, c)?,
                _ => predict(map)?,
            };
            visit(base + i, map, predicted)?;
        }
    }
    Ok(())
}

/// Fraction of samples predicted correctly, without candidate restriction.
pub fn accuracy(params: &ModelParams, samples: &[EncodedSample], mode: ReaderMode, exec: Execution) -> Result<f64> {
    let opts = EvalOptions {
        exec,
        ..EvalOptions::new(mode)
    };
    let mut correct = 0usize;
    run_encoded(params, samples, &opts, |i, _, p| {
        correct += usize::from(p == samples[i].answer);
        Ok(())
    })?;
    Ok(correct as f64 / samples.len() as f64)
}

/// Evaluates `samples` and, when `dump` is set, also returns the attention
/// of every sample.
pub fn evaluate(
    params: &ModelParams,
    vocab: &Vocabulary,
    samples: &[ClozeSample],
    dataset: &str,
    opts: &EvalOptions,
    dump: bool,
) -> Result<(EvalReport, Vec<AttentionDump>)> {
    if vocab.size() != params.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} ids but the model embeds {}",
            vocab.size(),
            params.config.vocab_size
        )));
    }
    let encoded: Vec<EncodedSample> = samples.iter().map(|s| vocab.encode_sample(s)).collect();
    let name = |id: u32| vocab.id_to_token(id).unwrap_or_else(|| format!("<id {id}>"));
    let mut predictions = Vec::with_capacity(samples.len());
    let mut records = Vec::new();
    let mut dumps = Vec::new();
    run_encoded(params, &encoded, opts, |i, map, predicted| {
        let gold = encoded[i].answer;
        let ok = predicted == gold;
        predictions.push(predicted);
        if opts.per_sample {
            let ranked = ranking(map);
            records.push(SampleResult {
                index: i,
                predicted: name(predicted),
                gold: samples[i].answer.clone(),
                correct: ok,
                gold_rank: ranked.iter().position(|(w, _)| *w == gold).map(|r| r + 1),
                top: ranked.iter().take(opts.top_k).map(|&(w, p)| (name(w), p)).collect(),
            });
        }
        if dump {
            dumps.push(AttentionDump {
                sample: i,
                document_ids: encoded[i].doc.clone(),
                attention: map.clone(),
            });
        }
        Ok(())
    })?;
    let gold: Vec<u32> = encoded.iter().map(|e| e.answer).collect();
    let mut report = EvalReport::from_predictions(dataset, opts.mode, &predictions, &gold)?;
    report.samples = opts.per_sample.then_some(records);
    Ok((report, dumps))
}

pub fn save_attention_dump(path: &Path, dumps: &[AttentionDump]) -> Result<()> {
    write_jsonl(path, dumps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reader::ModelConfig;
    use crate::sample::PLACEHOLDER;
    use crate::vocab::build_from_samples;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn samples() -> Vec<ClozeSample> {
        ["a b c a", "d e d f", "g h g i", "j k l j"]
            .iter()
            .map(|d| {
                let doc = toks(d);
                ClozeSample {
                    answer: doc[0].clone(),
                    query: vec!["q".into(), PLACEHOLDER.into()],
                    document: doc,
                    candidates: None,
                    meta: None,
                }
            })
            .collect()
    }

    fn model(vocab: &Vocabulary) -> ModelParams {
        let config = ModelConfig {
            vocab_size: vocab.size(),
            embed_dim: 4,
            hidden_dim: 3,
            dropout_rate: 0.0,
            mode: ReaderMode::Sum,
        };
        ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn dataset_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let s = samples();
        save_dataset(&path, &s).unwrap();
        assert_eq!(load_dataset(&path, true).unwrap().samples, s);

        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"document\":[\"a\"],\"query\":[\"a\"],\"answer\":\"a\"}\nnot json\n");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(&path, true), Err(Error::Validation { line: 5, .. })));
        let lenient = load_dataset(&path, false).unwrap();
        assert_eq!(lenient.samples.len(), 4);
        assert_eq!(lenient.skipped.iter().map(|e| e.line).collect::<Vec<_>>(), [5, 6]);
    }

    #[test]
    fn accuracy_counts_correct_predictions() {
        let s = samples();
        let vocab = build_from_samples(&s, None).unwrap();
        let params = model(&vocab);
        let opts = EvalOptions {
            per_sample: true,
            ..EvalOptions::new(ReaderMode::Sum)
        };
        let (report, dumps) = evaluate(&params, &vocab, &s, "toy", &opts, true).unwrap();
        let correct = report.samples.as_ref().unwrap().iter().filter(|r| r.correct).count();
        assert_eq!(report.correct, correct);
        assert_eq!(report.accuracy, correct as f64 / 4.0);
        assert_eq!(dumps.len(), 4);
        for (d, smp) in dumps.iter().zip(&s) {
            d.attention.validate(&d.document_ids, &vec![true; smp.document.len()]).unwrap();
        }
        let again = evaluate(&params, &vocab, &s, "toy", &opts, false).unwrap().0;
        assert_eq!(again, report);
    }

    #[test]
    fn report_counts() {
        let r = EvalReport::from_predictions("x", ReaderMode::Sum, &[1, 2, 3, 4], &[1, 9, 3, 4]).unwrap();
        assert_eq!((r.total, r.correct, r.accuracy), (4, 3, 0.75));
        assert!(EvalReport::from_predictions("x", ReaderMode::Sum, &[], &[]).is_err());
    }

    #[test]
    fn constant_model_scores_its_share() {
        // Zero weights give uniform attention, so the most frequent word wins.
        let s: Vec<ClozeSample> = (0..10)
            .map(|i| {
                let doc = toks(&format!("z z z a{i} b{i} a{i}"));
                ClozeSample {
                    answer: if i == 0 { "z".into() } else { format!("a{i}") },
                    query: vec![format!("q{i}"), PLACEHOLDER.into()],
                    document: doc,
                    candidates: None,
                    meta: None,
                }
            })
            .collect();
        let vocab = build_from_samples(&s, None).unwrap();
        let mut params = model(&vocab);
        for t in params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let (report, _) = evaluate(&params, &vocab, &s, "const", &EvalOptions::new(ReaderMode::Avg), false).unwrap();
        assert_eq!(report.accuracy, 0.1);
    }

    #[test]
    fn candidate_restriction_forces_the_prediction() {
        let mut s = samples();
        let vocab = build_from_samples(&s, None).unwrap();
        let params = model(&vocab);
        for smp in &mut s {
            smp.candidates = Some(vec![smp.answer.clone()]);
        }
        let opts = EvalOptions {
            restrict_candidates: true,
            ..EvalOptions::new(ReaderMode::Avg)
        };
        assert_eq!(evaluate(&params, &vocab, &s, "toy", &opts, false).unwrap().0.accuracy, 1.0);
    }

    #[test]
    fn degenerate_inputs() {
        let s = samples();
        let vocab = build_from_samples(&s, None).unwrap();
        let params = model(&vocab);
        let opts = EvalOptions::new(ReaderMode::Sum);
        assert!(matches!(evaluate(&params, &vocab, &[], "x", &opts, false), Err(Error::Usage(_))));
        let other = build_from_samples(&s[..1], None).unwrap();
        assert!(matches!(evaluate(&params, &other, &s, "x", &opts, false), Err(Error::Config(_))));
    }
}
