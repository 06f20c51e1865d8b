use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TaggedDocument;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::sample::{ClozeSample, SampleMeta, PLACEHOLDER};
use crate::vocab::fnv1a64;

/// Tags that count as nouns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NounTagSet(BTreeSet<String>);

impl Default for NounTagSet {
    fn default() -> Self {
        NounTagSet::new(["n", "NN", "NNS", "NOUN"])
    }
}

impl NounTagSet {
    pub fn new<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        NounTagSet(tags.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.0.contains(tag)
    }
}

pub fn default_noun_predicate(tag: &str) -> bool {
    matches!(tag, "n" | "NN" | "NNS" | "NOUN")
}

/// A token position: sentence index and token index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Occurrence {
    pub sentence: usize,
    pub index: usize,
}

/// Surface forms with at least two noun-tagged occurrences, mapped to those
/// occurrences in document order. Occurrences under other tags are not
/// counted and not listed.
pub fn candidate_answers(doc: &TaggedDocument, is_noun: impl Fn(&str) -> bool) -> BTreeMap<String, Vec<Occurrence>> {
    let mut found: BTreeMap<String, Vec<Occurrence>> = BTreeMap::new();
    for (s, sentence) in doc.sentences.iter().enumerate() {
        for (i, (tok, tag)) in sentence.iter().enumerate() {
            if is_noun(tag) {
                found
                    .entry(tok.clone())
                    .or_default()
                    .push(Occurrence { sentence: s, index: i });
            }
        }
    }
    found.retain(|_, occ| occ.len() >= 2);
    found
}

/// A document that produced no samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub doc_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocOutcome {
    pub samples: Vec<ClozeSample>,
    pub skipped: Option<SkipRecord>,
}

/// Draws up to `samples_per_doc` cloze samples from one document.
///
/// Each draw picks an answer uniformly among candidates with unused
/// occurrences, then one of its occurrences uniformly, without
/// replacement. An occurrence is only usable when its sentence mentions the
/// answer exactly once, since otherwise the answer would survive in the
/// query. The query sentence stays in the document, blanked.
pub fn generate_samples<R: Rng + ?Sized>(
    doc: &TaggedDocument,
    rng: &mut R,
    samples_per_doc: usize,
    is_noun: impl Fn(&str) -> bool,
) -> Result<DocOutcome> {
    if samples_per_doc == 0 {
        return Err(Error::Config("samples_per_doc must be at least 1".into()));
    }
    let skip = |reason: &str| DocOutcome {
        samples: Vec::new(),
        skipped: Some(SkipRecord {
            doc_id: doc.doc_id.clone(),
            reason: reason.to_string(),
        }),
    };
    let candidates = candidate_answers(doc, is_noun);
    if candidates.is_empty() {
        return Ok(skip("no noun occurs at least twice"));
    }
    let mut pool: Vec<(String, Vec<Occurrence>)> = candidates
        .into_iter()
        .map(|(tok, occ)| {
            let usable = occ
                .into_iter()
                .filter(|o| doc.sentences[o.sentence].iter().filter(|(t, _)| *t == tok).count() == 1)
                .collect::<Vec<_>>();
            (tok, usable)
        })
        .filter(|(_, occ)| !occ.is_empty())
        .collect();
    if pool.is_empty() {
        return Ok(skip("every candidate occurrence shares its sentence with another mention of the answer"));
    }

    let mut samples = Vec::with_capacity(samples_per_doc);
    while samples.len() < samples_per_doc && !pool.is_empty() {
        let a = rng.random_range(0..pool.len());
        let o = rng.random_range(0..pool[a].1.len());
        let occ = pool[a].1.remove(o);
        let answer = pool[a].0.clone();
        if pool[a].1.is_empty() {
            pool.remove(a);
        }
        let mut document = Vec::new();
        let mut query = Vec::new();
        for (s, sentence) in doc.sentences.iter().enumerate() {
            for (i, (tok, _)) in sentence.iter().enumerate() {
                let blank = s == occ.sentence && i == occ.index;
                let tok = if blank { PLACEHOLDER.to_string() } else { tok.clone() };
                if s == occ.sentence {
                    query.push(tok.clone());
                }
                document.push(tok);
            }
        }
        samples.push(ClozeSample {
            document,
            query,
            answer,
            candidates: None,
            meta: Some(SampleMeta {
                doc_id: doc.doc_id.clone(),
                sentence: occ.sentence,
                occurrence: occ.index,
            }),
        });
    }
    Ok(DocOutcome {
        samples,
        skipped: None,
    })
}

/// Seed for one document, so generation does not depend on corpus order.
pub fn doc_seed(seed: u64, doc_id: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(doc_id.as_bytes());
    fnv1a64(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedCorpus {
    pub samples: Vec<ClozeSample>,
    pub skipped: Vec<SkipRecord>,
}

/// Runs [`generate_samples`] over every document, each with its own seed.
/// Output keeps document order.
pub fn generate_corpus(
    docs: &[TaggedDocument],
    seed: u64,
    samples_per_doc: usize,
    nouns: &NounTagSet,
    exec: Execution,
) -> Result<GeneratedCorpus> {
    let outcomes = exec.map(docs, |_, doc| {
        let mut rng = ChaCha8Rng::seed_from_u64(doc_seed(seed, &doc.doc_id));
        generate_samples(doc, &mut rng, samples_per_doc, |t| nouns.contains(t))
    });
    let mut out = GeneratedCorpus {
        samples: Vec::new(),
        skipped: Vec::new(),
    };
    for o in outcomes {
        let o = o?;
        out.samples.extend(o.samples);
        out.skipped.extend(o.skipped);
    }
    Ok(out)
}
