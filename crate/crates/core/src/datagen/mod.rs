//! Cloze triple generation from sentence-segmented, POS-tagged text.
//!
//! Candidate answers are nouns occurring at least twice in a document. One
//! occurrence is blanked with the placeholder; its sentence becomes the
//! query and the blanked document becomes the context.

mod corpus;
mod generate;
mod stats;

pub use corpus::{parse_tagged_corpus, TaggedDocument};
pub use generate::{
    candidate_answers, default_noun_predicate, doc_seed, generate_corpus, generate_samples, DocOutcome,
    GeneratedCorpus, NounTagSet, Occurrence, SkipRecord,
};
pub use stats::{dataset_stats, DatasetStats};
